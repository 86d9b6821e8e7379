"""Loss, optimizer, learning-rate staging, early stopping, and the epoch loop.

The protocol: up to 30 epochs, batch size 32, AdamW with a staged learning
rate (3e-4 / 6e-4 / 1.2e-4), label smoothing 0.1, early stopping on
validation loss with best-weight restore. Everything random (shuffling,
dropout, augmentation) is keyed off the config seed, so a run is a pure
function of (initial model, dataset, config).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from . import tensor as T
from .data import AugmentParams, augment
from .errors import ContractError, ProtocolError
from .tensor import Tensor


@dataclass
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 32
    lr_stages: tuple = (3e-4, 6e-4, 1.2e-4)
    lr_boundaries: tuple = (10, 20)   # equal thirds; the protocol gives no boundaries
    label_smoothing: float = 0.1
    weight_decay: float = 1e-4        # AdamW default; unstated upstream
    early_stop_patience: int = 5
    early_stop_min_delta: float = 1e-6
    restore_best: bool = True
    seed: int = 42
    data_fraction: float = 1.0
    val_fraction: float = 0.10
    augment_params: AugmentParams | None = None
    # optional convergence target: stop once infer-mode training accuracy
    # reaches this value (used by the desk-scale harness)
    target_train_accuracy: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.max_epochs < 0:
            raise ContractError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.lr_stages) != len(self.lr_boundaries) + 1:
            raise ContractError(
                f"{len(self.lr_stages)} lr stages need "
                f"{len(self.lr_stages) - 1} boundaries, got {len(self.lr_boundaries)}"
            )
        if any(r <= 0 for r in self.lr_stages):
            raise ContractError(f"all learning rates must be > 0, got {self.lr_stages}")
        b = tuple(self.lr_boundaries)
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ContractError(f"stage boundaries must strictly increase, got {b}")
        if b and (b[0] < 0 or (self.max_epochs > 0 and b[-1] > self.max_epochs)):
            raise ContractError(
                f"stage boundaries {b} must lie within [0, {self.max_epochs}]"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError(
                f"label smoothing must be in [0, 1), got {self.label_smoothing}"
            )
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.early_stop_patience < 1:
            raise ContractError(
                f"early-stop patience must be >= 1, got {self.early_stop_patience}"
            )
        if not 0.0 < self.data_fraction <= 1.0:
            raise ContractError(
                f"data fraction must be in (0, 1], got {self.data_fraction}"
            )

    def override(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class History:
    epochs: list = field(default_factory=list)
    total_seconds: float = 0.0
    best_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.epochs)

    def val_losses(self) -> list:
        return [e.val_loss for e in self.epochs]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

_P_CLAMP = 1e-7


def bce_loss(p, y, smoothing: float = 0.0) -> Tensor:
    """Binary cross-entropy on probabilities with optional label smoothing.

    Targets become y' = y*(1-s) + s/2; probabilities are clamped to
    [1e-7, 1 - 1e-7]. Batched inputs return the mean loss.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must be in [0, 1), got {smoothing}")
    p = p if isinstance(p, Tensor) else Tensor(p)
    y = np.asarray(y, dtype=p.data.dtype)
    y_soft = y * (1.0 - smoothing) + smoothing / 2.0
    pc = T.clip(p, _P_CLAMP, 1.0 - _P_CLAMP)
    loss = T.mul(T.add(T.mul(T.log(pc), y_soft),
                       T.mul(T.log(T.add(T.mul(pc, -1.0), 1.0)), 1.0 - y_soft)),
                 -1.0)
    return T.tmean(loss) if loss.ndim else loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class OptimizerState:
    """Per-parameter first/second moment estimates plus a step counter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adamw_step(params, grads, state: OptimizerState, lr: float,
               weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay shrinks each parameter by lr * wd * p separately from the
    bias-corrected moment update p -= lr * m_hat / (sqrt(v_hat) + eps).
    Missing gradients count as zero.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be > 0, got {lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(
                f"gradient for {name} has shape {g.shape}, parameter is "
                f"{p.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# schedule / stopping
# ---------------------------------------------------------------------------


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant staged rate; boundaries are left-inclusive."""
    if not 0 <= epoch < config.max_epochs:
        raise ContractError(
            f"epoch {epoch} outside [0, {config.max_epochs})"
        )
    stage = 0
    for boundary in config.lr_boundaries:
        if epoch >= boundary:
            stage += 1
    return config.lr_stages[stage]


def early_stop(val_losses, patience: int, min_delta: float = 1e-6):
    """(stop, best_epoch): stop once the last ``patience`` epochs all fail
    to improve the running best by more than ``min_delta``. Best epoch is
    the earliest argmin."""
    if not val_losses:
        raise ContractError("early_stop needs at least one validation loss")
    if patience < 1:
        raise ContractError(f"patience must be >= 1, got {patience}")
    best = float("inf")
    best_epoch = 0
    last_improvement = 0
    for i, loss in enumerate(val_losses):
        if loss < best - min_delta:
            best = loss
            best_epoch = i
            last_improvement = i
    stop = (len(val_losses) - 1 - last_improvement) >= patience
    return stop, best_epoch


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _stack(images, dtype):
    pixels = np.stack([im.pixels for im in images]).astype(dtype)
    labels = np.array([im.label for im in images], dtype=dtype)
    return pixels, labels


def _check_two_classes(images, what: str):
    labels = {im.label for im in images}
    if labels != {0, 1}:
        raise ProtocolError(f"{what} split must contain both classes, got {labels}")


def _predict_chunked(model, pixels, chunk: int = 128) -> np.ndarray:
    outs = [model.forward(pixels[i:i + chunk], mode=L.INFER).data
            for i in range(0, len(pixels), chunk)]
    return np.concatenate(outs)


def _snapshot(model):
    params = {name: t.data.copy() for name, t in model.parameters().items()}
    state = {name: arr.copy() for name, arr in model.state_arrays().items()}
    return params, state


def _restore(model, snapshot):
    params, state = snapshot
    for name, t in model.parameters().items():
        t.data = params[name].copy()
    for name, arr in state.items():
        step, attr = name.rsplit(".", 1)
        setattr(dict(model.steps)[step], attr, arr.copy())


def train(model, split, config: TrainConfig):
    """Run the training protocol; returns (model, History).

    Deterministic given the seed: shuffling, augmentation, and dropout all
    draw from one generator seeded by ``config.seed``. On early stop the
    best-validation weights are restored; when the accuracy target fires
    the current weights are kept.
    """
    config.validate()
    history = History()
    if config.max_epochs == 0:
        return model, history

    _check_two_classes(split.train, "training")
    _check_two_classes(split.validation, "validation")

    dtype = model.spec.np_dtype()
    train_px, train_y = _stack(split.train, dtype)
    val_px, val_y = _stack(split.validation, dtype)
    n = len(train_px)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = OptimizerState(params, config.beta1, config.beta2, config.eps)

    best_snapshot = None
    best_val = float("inf")
    t_start = time.perf_counter()

    for epoch in range(config.max_epochs):
        t_epoch = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(n)
        if config.augment_params is not None:
            aug_seeds = rng.integers(0, 2**31, size=n)

        batches = [order[i:i + config.batch_size]
                   for i in range(0, n, config.batch_size)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            # batchnorm needs >= 2 samples; fold the orphan into the
            # previous batch
            batches[-2] = np.concatenate([batches[-2], batches[-1]])
            batches.pop()

        epoch_loss = 0.0
        for idx in batches:
            xb = train_px[idx]
            if config.augment_params is not None:
                xb = np.stack([
                    augment(train_px[i], config.augment_params, int(aug_seeds[i]))
                    for i in idx
                ]).astype(dtype)
            probs = model.forward(xb, mode=L.TRAIN, rng=rng)
            loss = bce_loss(probs, train_y[idx], config.label_smoothing)
            loss.backward()
            grads = {name: t.grad for name, t in params.items()}
            adamw_step(params, grads, opt, lr, config.weight_decay)
            model.zero_grads()
            epoch_loss += float(loss.data) * len(idx)
        epoch_loss /= n

        val_probs = _predict_chunked(model, val_px)
        val_loss = float(bce_loss(Tensor(val_probs), val_y,
                                  config.label_smoothing).data)
        history.epochs.append(EpochStats(
            epoch=epoch, lr=lr, train_loss=epoch_loss, val_loss=val_loss,
            seconds=time.perf_counter() - t_epoch,
        ))

        if val_loss < best_val - config.early_stop_min_delta:
            best_val = val_loss
            if config.restore_best:
                best_snapshot = _snapshot(model)

        if config.target_train_accuracy is not None:
            train_probs = _predict_chunked(model, train_px)
            acc = float(((train_probs >= 0.5) == (train_y >= 0.5)).mean())
            if acc >= config.target_train_accuracy:
                history.best_epoch = epoch
                break

        stop, best_epoch = early_stop(history.val_losses(),
                                      config.early_stop_patience,
                                      config.early_stop_min_delta)
        history.best_epoch = best_epoch
        if stop:
            history.stopped_early = True
            if config.restore_best and best_snapshot is not None:
                _restore(model, best_snapshot)
            break

    history.total_seconds = time.perf_counter() - t_start
    return model, history

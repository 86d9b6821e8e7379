"""Model specs, builders for the three architectures, and weight files.

``ModelSpec`` is a declarative description; ``build`` turns it into a
``Model`` (ordered layers plus a named parameter registry) while verifying
the whole shape chain. Three stock specs are provided:

* ``cnn``: four 3x3 conv blocks (32/64/128/256 filters); batchnorm and 2x2
  max pooling in the first two blocks only; GAP -> dropout 0.1 -> sigmoid.
* ``vit``: 16x16 patches embedded to 32 dims with a learnable positional
  table; four pre-norm transformer blocks (2 heads x 16 dims); GAP over
  patches -> MLP 128/64 with GELU and dropout 0.3 -> sigmoid.
* ``hybrid``: the conv ladder with batchnorm everywhere and two poolings
  (128 -> 32 spatially), then 16x16 patches of the 32x32x256 feature map
  (4 patches, 65536 flattened) embedded to 256 dims, four transformer
  blocks with feed-forward dropout 0.5, GAP -> sigmoid.

Trained parameters persist to a little-endian, name-indexed binary file
with a versioned header.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import DimensionError, ValidationError, WeightsFormatError
from .tensor import Tensor

KINDS = ("cnn", "vit", "hybrid")

WEIGHTS_MAGIC = b"PNWT"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; every field is config-overridable."""

    kind: str
    input_shape: tuple = (128, 128, 3)
    # convolutional stage (cnn / hybrid)
    conv_filters: tuple = ()
    kernel_size: int = 3
    conv_batchnorm: tuple = ()
    pool_after: tuple = ()
    head_dropout: float = 0.0
    # transformer stage (vit / hybrid)
    patch_size: int = 16
    embed_dim: int = 32
    heads: int = 2
    head_dim: int = 16
    num_blocks: int = 4
    ffn_hidden: int = 128
    ffn_dropout: float = 0.1
    attn_scale: object = "head_dim"
    mlp_head: tuple = ()
    mlp_dropout: float = 0.0
    dtype: str = "float64"

    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_shape", "conv_filters", "conv_batchnorm", "pool_after",
                    "mlp_head"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("input_shape", "conv_filters", "conv_batchnorm", "pool_after",
                    "mlp_head"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def override(self, **kwargs) -> "ModelSpec":
        return replace(self, **kwargs)


def default_cnn(input_shape=(128, 128, 3), **overrides) -> ModelSpec:
    spec = ModelSpec(
        kind="cnn",
        input_shape=tuple(input_shape),
        conv_filters=(32, 64, 128, 256),
        conv_batchnorm=(True, True, False, False),
        pool_after=(0, 1),
        head_dropout=0.1,
    )
    return spec.override(**overrides)


def default_vit(input_shape=(128, 128, 3), **overrides) -> ModelSpec:
    spec = ModelSpec(
        kind="vit",
        input_shape=tuple(input_shape),
        patch_size=16,
        embed_dim=32,
        heads=2,
        head_dim=16,
        num_blocks=4,
        ffn_hidden=128,
        ffn_dropout=0.1,
        mlp_head=(128, 64),
        mlp_dropout=0.3,
    )
    return spec.override(**overrides)


def default_hybrid(input_shape=(128, 128, 3), **overrides) -> ModelSpec:
    spec = ModelSpec(
        kind="hybrid",
        input_shape=tuple(input_shape),
        conv_filters=(32, 64, 128, 256),
        conv_batchnorm=(True, True, True, True),
        pool_after=(0, 1),
        patch_size=16,
        embed_dim=256,
        heads=4,
        head_dim=64,
        num_blocks=4,
        ffn_hidden=1024,
        ffn_dropout=0.5,
        mlp_head=(),
    )
    return spec.override(**overrides)


def default_spec(kind: str, input_shape=(128, 128, 3), **overrides) -> ModelSpec:
    try:
        maker = {"cnn": default_cnn, "vit": default_vit, "hybrid": default_hybrid}[kind]
    except KeyError:
        raise ValidationError(f"unknown model kind {kind!r}, expected one of {KINDS}")
    return maker(input_shape, **overrides)


class Model:
    """Ordered layers plus a named parameter registry."""

    def __init__(self, spec: ModelSpec, steps, shape_chain):
        self.spec = spec
        self.steps = steps  # list of (name, Layer)
        self.shape_chain = shape_chain  # list of (name, output shape tuple)
        self._registry = OrderedDict()
        for name, layer in steps:
            for pname, tensor in layer.params():
                self._registry[f"{name}.{pname}"] = tensor

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._registry

    def param_count(self) -> int:
        return sum(t.size for t in self._registry.values())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Non-trainable state (batchnorm running statistics)."""
        out = OrderedDict()
        for name, layer in self.steps:
            if isinstance(layer, L.BatchNorm):
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        return out

    def zero_grads(self) -> None:
        for t in self._registry.values():
            t.grad = None

    def forward(self, x, mode: str = L.INFER, rng=None) -> Tensor:
        """Probability of the positive class, one scalar per input image."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.spec.np_dtype()))
        expected = tuple(self.spec.input_shape)
        single = x.ndim == 3
        if (single and x.shape != expected) or (not single and x.shape[1:] != expected):
            raise DimensionError(
                f"model expects input shape {expected}, got {x.shape}"
            )
        if single:
            x = T.reshape(x, (1,) + x.shape)
        for _, layer in self.steps:
            x = layer.forward(x, mode=mode, rng=rng)
        out = T.reshape(x, (x.shape[0],))
        return T.reshape(out, ()) if single else out

    def predict(self, images) -> "float | np.ndarray":
        """Deterministic inference-mode probabilities in [0, 1]."""
        out = self.forward(images, mode=L.INFER)
        return float(out.data) if out.ndim == 0 else out.data.copy()

    def classify(self, images, threshold: float = 0.5):
        p = self.predict(images)
        return (np.asarray(p) >= threshold).astype(int)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def _build_conv_stage(spec, rng, dtype, steps, chain):
    h, w, c = spec.input_shape
    n_blocks = len(spec.conv_filters)
    _require(n_blocks > 0, "conv stage needs at least one block")
    _require(len(spec.conv_batchnorm) == n_blocks,
             f"conv_batchnorm has {len(spec.conv_batchnorm)} entries for "
             f"{n_blocks} conv blocks")
    for i, filters in enumerate(spec.conv_filters):
        name = f"block{i + 1}"
        steps.append((f"{name}.conv",
                      L.Conv2D(spec.kernel_size, c, filters, padding="same",
                               rng=rng, dtype=dtype)))
        c = filters
        chain.append((f"{name}.conv", (h, w, c)))
        if spec.conv_batchnorm[i]:
            steps.append((f"{name}.bn", L.BatchNorm(c, dtype=dtype)))
        steps.append((f"{name}.relu", L.ReLU()))
        if i in spec.pool_after:
            _require(h % 2 == 0 and w % 2 == 0,
                     f"{name}: cannot 2x2-pool odd feature map {h}x{w}x{c}")
            h, w = h // 2, w // 2
            steps.append((f"{name}.pool", L.MaxPool2D(2)))
            chain.append((f"{name}.pool", (h, w, c)))
    return h, w, c


def _build_transformer_stage(spec, rng, dtype, steps, chain, h, w, c):
    _require(spec.heads * spec.head_dim == spec.embed_dim,
             f"heads x head_dim = {spec.heads}x{spec.head_dim} != embedding "
             f"dim {spec.embed_dim}")
    _require(h % spec.patch_size == 0 and w % spec.patch_size == 0,
             f"feature map {h}x{w}x{c} not divisible into "
             f"{spec.patch_size}x{spec.patch_size} patches")
    embed = L.PatchEmbedding(spec.patch_size, h, w, c, spec.embed_dim,
                             rng=rng, dtype=dtype)
    steps.append(("embed", embed))
    n = embed.num_patches
    chain.append(("embed", (n, spec.embed_dim)))
    for i in range(spec.num_blocks):
        name = f"block{i + 1}"
        steps.append((f"{name}.attn",
                      L.AttentionBlock(spec.embed_dim, spec.heads, spec.head_dim,
                                       attn_scale=spec.attn_scale, rng=rng,
                                       dtype=dtype)))
        steps.append((f"{name}.ffn",
                      L.FeedForwardBlock(spec.embed_dim, spec.ffn_hidden,
                                         dropout_rate=spec.ffn_dropout, rng=rng,
                                         dtype=dtype)))
        chain.append((name, (n, spec.embed_dim)))
    return n


def _build_head(spec, rng, dtype, steps, chain, width):
    for i, units in enumerate(spec.mlp_head):
        name = f"head{i + 1}"
        steps.append((f"{name}.fc", L.Dense(width, units, rng=rng, dtype=dtype)))
        steps.append((f"{name}.act", L.GELU()))
        if spec.mlp_dropout:
            steps.append((f"{name}.drop", L.Dropout(spec.mlp_dropout)))
        width = units
        chain.append((name, (width,)))
    steps.append(("out.fc", L.Dense(width, 1, rng=rng, dtype=dtype)))
    steps.append(("out.sigmoid", L.SigmoidHead()))
    chain.append(("out", (1,)))


def _check_input(spec):
    _require(spec.kind in KINDS, f"unknown model kind {spec.kind!r}")
    _require(len(spec.input_shape) == 3 and all(d > 0 for d in spec.input_shape),
             f"input shape must be (H, W, C) with positive dims, got "
             f"{spec.input_shape}")


def build_cnn(spec: ModelSpec, seed: int = 0) -> Model:
    _require(spec.kind == "cnn", f"build_cnn got spec kind {spec.kind!r}")
    _check_input(spec)
    rng = np.random.default_rng(seed)
    dtype = spec.np_dtype()
    steps, chain = [], [("input", tuple(spec.input_shape))]
    h, w, c = _build_conv_stage(spec, rng, dtype, steps, chain)
    steps.append(("gap", L.GlobalAveragePool2D()))
    chain.append(("gap", (c,)))
    if spec.head_dropout:
        steps.append(("drop", L.Dropout(spec.head_dropout)))
    _build_head(spec, rng, dtype, steps, chain, c)
    return Model(spec, steps, chain)


def build_vit(spec: ModelSpec, seed: int = 0) -> Model:
    _require(spec.kind == "vit", f"build_vit got spec kind {spec.kind!r}")
    _check_input(spec)
    rng = np.random.default_rng(seed)
    dtype = spec.np_dtype()
    h, w, c = spec.input_shape
    steps, chain = [], [("input", tuple(spec.input_shape))]
    _build_transformer_stage(spec, rng, dtype, steps, chain, h, w, c)
    steps.append(("pool", L.SequencePool()))
    chain.append(("pool", (spec.embed_dim,)))
    _build_head(spec, rng, dtype, steps, chain, spec.embed_dim)
    return Model(spec, steps, chain)


def build_hybrid(spec: ModelSpec, seed: int = 0) -> Model:
    _require(spec.kind == "hybrid", f"build_hybrid got spec kind {spec.kind!r}")
    _check_input(spec)
    rng = np.random.default_rng(seed)
    dtype = spec.np_dtype()
    steps, chain = [], [("input", tuple(spec.input_shape))]
    h, w, c = _build_conv_stage(spec, rng, dtype, steps, chain)
    _build_transformer_stage(spec, rng, dtype, steps, chain, h, w, c)
    steps.append(("pool", L.SequencePool()))
    chain.append(("pool", (spec.embed_dim,)))
    _build_head(spec, rng, dtype, steps, chain, spec.embed_dim)
    return Model(spec, steps, chain)


def build(spec: ModelSpec, seed: int = 0) -> Model:
    builder = {"cnn": build_cnn, "vit": build_vit, "hybrid": build_hybrid}.get(spec.kind)
    if builder is None:
        raise ValidationError(f"unknown model kind {spec.kind!r}, expected one of {KINDS}")
    return builder(spec, seed)


# ---------------------------------------------------------------------------
# weight persistence: versioned header + name-indexed little-endian float64
# ---------------------------------------------------------------------------


def save_weights(model: Model, path) -> None:
    params = model.parameters()
    state = model.state_arrays()
    header = {
        "spec": model.spec.to_dict(),
        "params": [[name, list(t.shape)] for name, t in params.items()],
        "state": [[name, list(a.shape)] for name, a in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<HI", WEIGHTS_VERSION, len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for a in state.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path, expected_spec: ModelSpec | None = None) -> Model:
    """Rebuild the stored model; checks magic, version, and (optionally)
    that the declared spec matches the stored one."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise WeightsFormatError(f"{path}: not a weights file (magic {magic!r})")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(
                f"{path}: unsupported weights version {version}"
            )
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
            spec = ModelSpec.from_dict(header["spec"])
        except (ValueError, KeyError, TypeError) as exc:
            raise WeightsFormatError(f"{path}: corrupt header ({exc})") from exc
        if expected_spec is not None and expected_spec != spec:
            raise WeightsFormatError(
                f"{path}: stored spec does not match the declared spec"
            )
        model = build(spec)
        params = model.parameters()
        stored = [name for name, _ in header["params"]]
        if stored != list(params):
            raise WeightsFormatError(
                f"{path}: parameter names do not match the spec's model"
            )
        dtype = spec.np_dtype()
        for name, shape in header["params"]:
            shape = tuple(shape)
            if params[name].shape != shape:
                raise WeightsFormatError(
                    f"{path}: {name} has shape {shape}, model expects "
                    f"{params[name].shape}"
                )
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            params[name].data = arr.astype(dtype)
        for name, shape in header["state"]:
            shape = tuple(shape)
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            step, attr = name.rsplit(".", 1)
            setattr(dict(model.steps)[step], attr, arr.astype(dtype))
    return model

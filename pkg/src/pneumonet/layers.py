"""Neural building blocks: convolution, pooling, normalization, patch
embedding, multi-head self-attention, feed-forward blocks, dropout, dense.

Functional ops accept a single sample (``[H,W,C]`` images, ``[N,d]``
sequences) or a batch with one extra leading axis; gradients flow through
everything via the tensor engine. Layer classes own the parameters and any
mutable state (batchnorm running statistics) and delegate to the
functionals.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor, from_op

TRAIN = "train"
INFER = "infer"


def _as_batched(x: Tensor, sample_rank: int):
    """Promote a single sample to a batch of one; report whether we did."""
    if x.ndim == sample_rank:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == sample_rank + 1:
        return x, False
    raise DimensionError(
        f"expected rank {sample_rank} or {sample_rank + 1} input, got shape {x.shape}"
    )


def _squeeze_batch(x: Tensor, was_single: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if was_single else x


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same",
           stride: int = 1) -> Tensor:
    """2-D convolution over channels-last images.

    Output pixel (i, j, c') is the sum over input channels and the k x k
    kernel window of ``kernel[m, n, c, c'] * x[i*stride + m, j*stride + n, c]``
    plus ``bias[c']``.
    """
    xb, single = _as_batched(x, 3)
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[2], kernel.shape[3]
    if xb.shape[3] != c_in:
        raise DimensionError(
            f"conv2d input has {xb.shape[3]} channels but kernel expects {c_in}"
        )
    if padding not in ("same", "valid"):
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")

    data = xb.data
    b, h, w = data.shape[0], data.shape[1], data.shape[2]
    if padding == "same":
        out_h = -(-h // stride)
        out_w = -(-w // stride)
        pad_h = max((out_h - 1) * stride + k - h, 0)
        pad_w = max((out_w - 1) * stride + k - w, 0)
        pads = ((0, 0), (pad_h // 2, pad_h - pad_h // 2),
                (pad_w // 2, pad_w - pad_w // 2), (0, 0))
        padded = np.pad(data, pads)
    else:
        if h < k or w < k:
            raise DimensionError(
                f"valid conv needs input >= kernel, got {h}x{w} vs k={k}"
            )
        pads = ((0, 0), (0, 0), (0, 0), (0, 0))
        padded = data
        out_h = (h - k) // stride + 1
        out_w = (w - k) // stride + 1

    # windows: [B, H', W', C, k, k] -> cols flattened in (m, n, c) order to
    # match kernel.reshape(k*k*c_in, c_out)
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1], windows.shape[2]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    cols_mat = cols.reshape(b * out_h * out_w, k * k * c_in)
    w_mat = kernel.data.reshape(k * k * c_in, c_out)
    out_data = (cols_mat @ w_mat + bias.data).reshape(b, out_h, out_w, c_out)

    padded_shape = padded.shape

    def backward(g):
        g_mat = g.reshape(b * out_h * out_w, c_out)
        if kernel.requires_grad:
            kernel._accumulate((cols_mat.T @ g_mat).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=0))
        if xb.requires_grad:
            g_cols = (g_mat @ w_mat.T).reshape(b, out_h, out_w, k, k, c_in)
            g_pad = np.zeros(padded_shape, dtype=g.dtype)
            for m in range(k):
                for n in range(k):
                    g_pad[:, m:m + stride * out_h:stride,
                          n:n + stride * out_w:stride] += g_cols[:, :, :, m, n]
            (ph0, _), (pw0, _) = pads[1], pads[2]
            xb._accumulate(g_pad[:, ph0:ph0 + h, pw0:pw0 + w])

    out = from_op(out_data, (xb, kernel, bias), backward)
    return _squeeze_batch(out, single)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the first (row-major)
    argmax cell of each window."""
    xb, single = _as_batched(x, 3)
    b, h, w, c = xb.shape
    if h % window or w % window:
        raise DimensionError(
            f"maxpool2d needs spatial dims divisible by {window}, got {h}x{w}"
        )
    oh, ow = h // window, w // window
    tiles = xb.data.reshape(b, oh, window, ow, window, c)
    tiles = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(b, oh, ow, c, window * window)
    arg = tiles.argmax(axis=-1)  # first occurrence wins ties
    out_data = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if xb.requires_grad:
            routed = np.zeros((b, oh, ow, c, window * window), dtype=g.dtype)
            np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
            routed = routed.reshape(b, oh, ow, c, window, window)
            routed = routed.transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
            xb._accumulate(routed)

    out = from_op(out_data, (xb,), backward)
    return _squeeze_batch(out, single)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the spatial grid: [H,W,C] -> [C] (or batched)."""
    xb, single = _as_batched(x, 3)
    out = T.tmean(xb, axis=(1, 2))
    return _squeeze_batch(out, single)


def sequence_mean(seq: Tensor) -> Tensor:
    """Mean over the patch axis: [N,d] -> [d] (or batched)."""
    sb, single = _as_batched(seq, 2)
    out = T.tmean(sb, axis=1)
    return _squeeze_batch(out, single)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing vector to zero mean / unit variance, then
    apply the learned affine transform."""
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = T.add(x, T.mul(mu, -1.0))
    var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
    inv = T.power(T.add(var, eps), -0.5)
    return T.add(T.mul(T.mul(centered, inv), gain), bias)


def batchnorm(x: Tensor, state: "BatchNorm", mode: str = INFER) -> Tensor:
    """Per-channel batch normalization over all leading axes.

    Train mode normalizes by the current batch statistics and folds them
    into the running estimates; infer mode uses the running estimates only.
    """
    if x.shape[-1] != state.channels:
        raise DimensionError(
            f"batchnorm expects {state.channels} channels, got shape {x.shape}"
        )
    if mode == TRAIN:
        if x.ndim < 2 or x.shape[0] < 2:
            raise ContractError(
                f"batchnorm train mode needs batch size >= 2, got shape {x.shape}"
            )
        axes = tuple(range(x.ndim - 1))
        mu = T.tmean(x, axis=axes, keepdims=True)
        centered = T.add(x, T.mul(mu, -1.0))
        var = T.tmean(T.mul(centered, centered), axis=axes, keepdims=True)
        inv = T.power(T.add(var, state.eps), -0.5)
        out = T.add(T.mul(T.mul(centered, inv), state.gamma), state.beta)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu.data.reshape(-1)
        state.running_var = m * state.running_var + (1 - m) * var.data.reshape(-1)
        return out
    scale = 1.0 / np.sqrt(state.running_var + state.eps)
    normed = T.mul(T.add(x, -state.running_mean), scale)
    return T.add(T.mul(normed, state.gamma), state.beta)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, mode: str = INFER, rng=None, seed=None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors
    by 1/(1-rate) in train mode; identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != TRAIN or rate == 0.0:
        return x
    if rng is None:
        if seed is None:
            raise ContractError("train-mode dropout needs an rng or a seed")
        rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, mask.astype(x.dtype))


# ---------------------------------------------------------------------------
# patch embedding / transformer pieces
# ---------------------------------------------------------------------------


def patch_flatten(x: Tensor, patch_size: int) -> Tensor:
    """Cut [H,W,C] into non-overlapping p x p patches, flattened row-major:
    output [N, p*p*C] with N = (H/p)*(W/p). Lossless before projection."""
    xb, single = _as_batched(x, 3)
    b, h, w, c = xb.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(
            f"image {h}x{w} is not divisible into {p}x{p} patches"
        )
    gh, gw = h // p, w // p
    out = T.reshape(xb, (b, gh, p, gw, p, c))
    out = T.transpose(out, (0, 1, 3, 2, 4, 5))
    out = T.reshape(out, (b, gh * gw, p * p * c))
    return _squeeze_batch(out, single)


def patch_embed(x: Tensor, layer: "PatchEmbedding") -> Tensor:
    """Flatten patches, project to the embedding dimension, add the
    learnable positional table."""
    xb, single = _as_batched(x, 3)
    flat = patch_flatten(xb, layer.patch_size)
    if flat.shape[-1] != layer.flatten_dim:
        raise DimensionError(
            f"patch flatten dim {flat.shape[-1]} != projection input {layer.flatten_dim}"
        )
    if flat.shape[1] != layer.num_patches:
        raise DimensionError(
            f"got {flat.shape[1]} patches, positional table has {layer.num_patches}"
        )
    seq = T.add(T.matmul(flat, layer.weight), layer.bias)
    seq = T.add(seq, layer.positional)
    return _squeeze_batch(seq, single)


def multi_head_attention(seq: Tensor, block: "AttentionBlock") -> Tensor:
    """Pre-norm multi-head self-attention with a residual connection.

    Per head: softmax((X Wq)(X Wk)^T / sqrt(scale)) (X Wv); heads are
    concatenated and passed through the output projection before the
    residual add. Row-stochastic attention weights are stashed on the block
    (``last_attn``) for inspection.
    """
    sb, single = _as_batched(seq, 2)
    b, n, d = sb.shape
    if d != block.dim:
        raise DimensionError(f"attention block dim {block.dim} != input dim {d}")
    h, dk = block.heads, block.head_dim
    xn = layer_norm(sb, block.ln_gain, block.ln_bias)

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, n, h, dk)), (0, 2, 1, 3))

    q = split_heads(T.matmul(xn, block.wq))
    k = split_heads(T.matmul(xn, block.wk))
    v = split_heads(T.matmul(xn, block.wv))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                   1.0 / math.sqrt(block.scale_value()))
    attn = T.softmax_lastdim(scores)
    block.last_attn = attn.data
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, h * dk))
    out = T.add(sb, T.matmul(ctx, block.wo))
    return _squeeze_batch(out, single)


def feed_forward(seq: Tensor, block: "FeedForwardBlock", mode: str = INFER,
                 rng=None) -> Tensor:
    """Pre-norm position-wise MLP with GELU, dropout, and a residual add."""
    sb, single = _as_batched(seq, 2)
    if sb.shape[-1] != block.dim:
        raise DimensionError(f"feed-forward block dim {block.dim} != input dim {sb.shape[-1]}")
    xn = layer_norm(sb, block.ln_gain, block.ln_bias)
    hidden = T.gelu(T.add(T.matmul(xn, block.w1), block.b1))
    hidden = dropout(hidden, block.dropout_rate, mode=mode, rng=rng)
    out = T.add(sb, T.add(T.matmul(hidden, block.w2), block.b2))
    return _squeeze_batch(out, single)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def fan_in_uniform(rng, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def scaled_normal(rng, shape, dtype, std: float = 0.02) -> np.ndarray:
    return (rng.normal(size=shape) * std).astype(dtype)


# ---------------------------------------------------------------------------
# layer classes
# ---------------------------------------------------------------------------


class Layer:
    """Base: parameters are (name, Tensor) pairs; forward may need the mode
    and, for stochastic layers, a Generator."""

    def params(self):
        return []

    def forward(self, x: Tensor, mode: str = INFER, rng=None) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, kernel_size, c_in, c_out, padding="same", stride=1,
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        fan_in = k * k * c_in
        self.kernel = Tensor(fan_in_uniform(rng, (k, k, c_in, c_out), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.padding = padding
        self.stride = stride

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def forward(self, x, mode=INFER, rng=None):
        return conv2d(x, self.kernel, self.bias, self.padding, self.stride)


class BatchNorm(Layer):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float64):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_arrays(self):
        return [("running_mean", "running_mean"), ("running_var", "running_var")]

    def forward(self, x, mode=INFER, rng=None):
        return batchnorm(x, self, mode)


class ReLU(Layer):
    def forward(self, x, mode=INFER, rng=None):
        return T.relu(x)


class SigmoidHead(Layer):
    def forward(self, x, mode=INFER, rng=None):
        return T.sigmoid(x)


class MaxPool2D(Layer):
    def __init__(self, window=2):
        self.window = window

    def forward(self, x, mode=INFER, rng=None):
        return maxpool2d(x, self.window)


class GlobalAveragePool2D(Layer):
    def forward(self, x, mode=INFER, rng=None):
        return global_average_pool(x)


class SequencePool(Layer):
    def forward(self, x, mode=INFER, rng=None):
        return sequence_mean(x)


class Dropout(Layer):
    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, mode=INFER, rng=None):
        return dropout(x, self.rate, mode=mode, rng=rng)


class Dense(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(fan_in_uniform(rng, (d_in, d_out), d_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode=INFER, rng=None):
        single = x.ndim == 1
        if single:
            x = T.reshape(x, (1,) + x.shape)
        out = T.add(T.matmul(x, self.weight), self.bias)
        return T.reshape(out, out.shape[1:]) if single else out


class GELU(Layer):
    def forward(self, x, mode=INFER, rng=None):
        return T.gelu(x)


class PatchEmbedding(Layer):
    """Patch extraction + linear projection + learnable positional table."""

    def __init__(self, patch_size, in_h, in_w, in_c, embed_dim, rng=None,
                 dtype=np.float64):
        if in_h % patch_size or in_w % patch_size:
            raise DimensionError(
                f"input {in_h}x{in_w} not divisible by patch size {patch_size}"
            )
        rng = rng or np.random.default_rng(0)
        self.patch_size = patch_size
        self.num_patches = (in_h // patch_size) * (in_w // patch_size)
        self.flatten_dim = patch_size * patch_size * in_c
        self.embed_dim = embed_dim
        self.weight = Tensor(scaled_normal(rng, (self.flatten_dim, embed_dim), dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(embed_dim, dtype=dtype), requires_grad=True)
        self.positional = Tensor(scaled_normal(rng, (self.num_patches, embed_dim), dtype),
                                 requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias),
                ("positional", self.positional)]

    def forward(self, x, mode=INFER, rng=None):
        return patch_embed(x, self)


class AttentionBlock(Layer):
    """Pre-norm multi-head self-attention with residual connection.

    ``attn_scale`` selects the softmax temperature: "head_dim" divides the
    logits by sqrt(head_dim); a number divides by sqrt(that number).
    """

    def __init__(self, dim, heads, head_dim, attn_scale="head_dim", rng=None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.heads = heads
        self.head_dim = head_dim
        self.attn_scale = attn_scale
        self.last_attn = None
        total = heads * head_dim
        self.ln_gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.wq = Tensor(scaled_normal(rng, (dim, total), dtype), requires_grad=True)
        self.wk = Tensor(scaled_normal(rng, (dim, total), dtype), requires_grad=True)
        self.wv = Tensor(scaled_normal(rng, (dim, total), dtype), requires_grad=True)
        self.wo = Tensor(scaled_normal(rng, (total, dim), dtype), requires_grad=True)

    def scale_value(self) -> float:
        return float(self.head_dim) if self.attn_scale == "head_dim" else float(self.attn_scale)

    def params(self):
        return [("ln_gain", self.ln_gain), ("ln_bias", self.ln_bias),
                ("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]

    def forward(self, x, mode=INFER, rng=None):
        return multi_head_attention(x, self)


class FeedForwardBlock(Layer):
    """Pre-norm MLP (dense -> GELU -> dropout -> dense) with residual."""

    def __init__(self, dim, hidden, dropout_rate=0.0, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.hidden = hidden
        self.dropout_rate = dropout_rate
        self.ln_gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.w1 = Tensor(scaled_normal(rng, (dim, hidden), dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(scaled_normal(rng, (hidden, dim), dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def params(self):
        return [("ln_gain", self.ln_gain), ("ln_bias", self.ln_bias),
                ("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def forward(self, x, mode=INFER, rng=None):
        return feed_forward(x, self, mode=mode, rng=rng)


class LayerNorm(Layer):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        self.eps = eps
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def params(self):
        return [("gain", self.gain), ("bias", self.bias)]

    def forward(self, x, mode=INFER, rng=None):
        return layer_norm(x, self.gain, self.bias, self.eps)

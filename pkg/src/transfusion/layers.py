"""Neural building blocks: linear, layer norm, 1-D conv, positional encoding,
softmax/linear attention, multi-head attention, multi-scale conv, FFN.

Layers are pure functions of (input, parameters). Parameter containers are
plain dataclasses of tensors; initializers draw from a caller-supplied numpy
generator so model construction stays deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _accumulate,
    add,
    clamp_min,
    concat,
    div,
    elu,
    expand,
    get_default_dtype,
    matmul,
    mul,
    record_op,
    reduce_sum,
    relu,
    reshape,
    slice_axis,
    softmax_rows,
    transpose2d,
)

ATTENTION_KERNELS = ("softmax", "linear")
LINEAR_ATTN_DENOM_FLOOR = 1e-6


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


@dataclass
class LinearLayer:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor  # [d_out]

    @staticmethod
    def init(rng: np.random.Generator, d_in: int, d_out: int, dtype=None) -> "LinearLayer":
        if d_in < 1 or d_out < 1:
            raise ShapeError("linear dims must be >= 1")
        dt = dtype or get_default_dtype()
        return LinearLayer(
            weight=_uniform_init(rng, (d_in, d_out), d_in, dt),
            bias=Tensor(np.zeros(d_out, dtype=dt), requires_grad=True),
        )


def linear(x: Tensor, layer: LinearLayer) -> Tensor:
    """x @ W + b with the bias broadcast over rows (fused affine primitive)."""
    w, b = layer.weight, layer.bias
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out_data = x.data @ w.data + b.data

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return record_op(out_data, [x, w, b], bw)


@dataclass
class LayerNormParams:
    gain: Tensor  # [d]
    bias: Tensor  # [d]

    @staticmethod
    def init(d: int, dtype=None) -> "LayerNormParams":
        dt = dtype or get_default_dtype()
        return LayerNormParams(
            gain=Tensor(np.ones(d, dtype=dt), requires_grad=True),
            bias=Tensor(np.zeros(d, dtype=dt), requires_grad=True),
        )


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization (biased variance, eps inside the root), then affine.

    Fused forward/backward: one tape node instead of a dozen elementwise ones,
    which matters in the training loop.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got {x.shape}")
    d = x.shape[1]
    if d < 2:
        raise ShapeError("layer_norm needs feature dim >= 2")
    if params.gain.shape != (d,) or params.bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match feature dim")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * params.gain.data + params.bias.data

    def bw(g):
        if params.bias.requires_grad:
            _accumulate(params.bias, g.sum(axis=0))
        if params.gain.requires_grad:
            _accumulate(params.gain, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gx = g * params.gain.data
            row_mean = gx.mean(axis=1, keepdims=True)
            proj = (gx * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, inv * (gx - row_mean - xhat * proj))

    return record_op(out_data, [x, params.gain, params.bias], bw)


@dataclass
class Conv1dParams:
    kernel: Tensor  # [k, d_in, d_out]
    bias: Tensor  # [d_out]

    @staticmethod
    def init(rng: np.random.Generator, k: int, d_in: int, d_out: int, dtype=None) -> "Conv1dParams":
        if k % 2 == 0 or k < 1:
            raise ShapeError(f"conv kernel width must be odd and positive, got {k}")
        dt = dtype or get_default_dtype()
        return Conv1dParams(
            kernel=_uniform_init(rng, (k, d_in, d_out), k * d_in, dt),
            bias=Tensor(np.zeros(d_out, dtype=dt), requires_grad=True),
        )


def conv1d(x: Tensor, params: Conv1dParams) -> Tensor:
    """Cross-correlation along the sequence axis with same-length zero padding.

    x: [l, d_in] -> [l, d_out]; each output row sees (k-1)/2 neighbors per side.
    """
    kernel, bias = params.kernel, params.bias
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv kernel must be [k, d_in, d_out], got {kernel.shape}")
    k, d_in, d_out = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv kernel width must be odd, got {k}")
    if x.data.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    l = x.shape[0]
    half = (k - 1) // 2
    padded = np.zeros((l + k - 1, d_in), dtype=x.data.dtype)
    padded[half : half + l] = x.data
    # win_flat[t, i*k + j] = padded[t + j, i]; kernel flattened to match
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)  # [l, d_in, k]
    win_flat = np.ascontiguousarray(windows).reshape(l, d_in * k)
    ker_flat = kernel.data.transpose(1, 0, 2).reshape(d_in * k, d_out)
    out_data = win_flat @ ker_flat + bias.data

    def bw(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if kernel.requires_grad:
            dker = (win_flat.T @ g).reshape(d_in, k, d_out).transpose(1, 0, 2)
            _accumulate(kernel, dker)
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            for j in range(k):
                dpad[j : j + l] += g @ kernel.data[j].T
            _accumulate(x, dpad[half : half + l])

    return record_op(out_data, [x, kernel, bias], bw)


_PE_CACHE: dict[tuple, np.ndarray] = {}


def positional_encoding(l: int, d: int, dtype=None) -> Tensor:
    """Sinusoidal position features: sin on even columns, cos on odd, paired frequencies."""
    if d % 2 != 0:
        raise ShapeError(f"positional encoding needs even feature dim, got {d}")
    if l < 1:
        raise ShapeError("sequence length must be >= 1")
    dt = np.dtype(dtype or get_default_dtype())
    key = (l, d, dt.str)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(l, dtype=dt)[:, None]
        even = np.arange(0, d, 2, dtype=dt)[None, :]
        angles = pos / np.power(10000.0, even / d)
        pe = np.empty((l, d), dtype=dt)
        pe[:, 0::2] = np.sin(angles)
        pe[:, 1::2] = np.cos(angles)
        pe.setflags(write=False)
        _PE_CACHE[key] = pe
    return Tensor(pe)


@dataclass
class AttentionHeadConfig:
    d_model: int
    n_heads: int
    d_k: int
    d_v: int
    kernel: str = "linear"
    scale_qk: bool = True

    def __post_init__(self):
        if self.kernel not in ATTENTION_KERNELS:
            raise ValueError(f"unknown attention kernel {self.kernel!r}")
        if min(self.d_model, self.n_heads, self.d_k, self.d_v) < 1:
            raise ValueError("attention dims must be positive")
        if self.n_heads * self.d_k != self.d_model or self.n_heads * self.d_v != self.d_model:
            raise ValueError(
                f"n_heads*d_k and n_heads*d_v must equal d_model "
                f"({self.n_heads}x{self.d_k}/{self.d_v} vs {self.d_model})"
            )

    @staticmethod
    def from_d_model(d_model: int, n_heads: int, kernel: str = "linear", scale_qk: bool = True):
        if d_model % n_heads != 0:
            raise ValueError(f"n_heads {n_heads} must divide d_model {d_model}")
        dh = d_model // n_heads
        return AttentionHeadConfig(d_model, n_heads, dh, dh, kernel, scale_qk)


def attention(q: Tensor, k: Tensor, v: Tensor, kernel: str = "softmax", scale_qk: bool = True) -> Tensor:
    """Single-head attention: rows of q attend over rows of k/v.

    softmax kernel: softmax(q k^T / sqrt(d_k)) v (scaling optional).
    linear kernel: feature map phi(u) = elu(u) + 1 on q and k rows, then the
    associativity trick phi(q) (phi(k)^T v) / (phi(q) . sum phi(k)), linear in
    sequence length. Denominator floored at 1e-6.
    """
    if kernel not in ATTENTION_KERNELS:
        raise ValueError(f"unknown attention kernel {kernel!r}")
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k/v lengths differ: {k.shape} vs {v.shape}")
    if k.shape[0] < 1:
        raise ShapeError("attention needs at least one key/value row")
    if kernel == "softmax":
        scores = matmul(q, transpose2d(k))
        if scale_qk:
            scores = mul(scores, 1.0 / math.sqrt(q.shape[1]))
        return matmul(softmax_rows(scores), v)
    phi_q = add(elu(q), 1.0)
    phi_k = add(elu(k), 1.0)
    summarized = matmul(transpose2d(phi_k), v)  # [d_k, d_v]
    key_total = reshape(reduce_sum(phi_k, axis=0), (k.shape[1], 1))
    denom = clamp_min(matmul(phi_q, key_total), LINEAR_ATTN_DENOM_FLOOR)  # [l_q, 1]
    numer = matmul(phi_q, summarized)
    return div(numer, expand(denom, numer.shape))


@dataclass
class MultiHeadAttentionParams:
    proj_q: LinearLayer
    proj_k: LinearLayer
    proj_v: LinearLayer
    proj_out: LinearLayer

    @staticmethod
    def init(rng: np.random.Generator, cfg: AttentionHeadConfig, d_q_in: int, d_kv_in: int, dtype=None):
        return MultiHeadAttentionParams(
            proj_q=LinearLayer.init(rng, d_q_in, cfg.n_heads * cfg.d_k, dtype),
            proj_k=LinearLayer.init(rng, d_kv_in, cfg.n_heads * cfg.d_k, dtype),
            proj_v=LinearLayer.init(rng, d_kv_in, cfg.n_heads * cfg.d_v, dtype),
            proj_out=LinearLayer.init(rng, cfg.n_heads * cfg.d_v, cfg.d_model, dtype),
        )


def multi_head_attention(
    x_q: Tensor, x_kv: Tensor, cfg: AttentionHeadConfig, params: MultiHeadAttentionParams
) -> Tensor:
    """Project q/k/v, run per-head attention, concat heads, project to d_model."""
    q_all = linear(x_q, params.proj_q)
    k_all = linear(x_kv, params.proj_k)
    v_all = linear(x_kv, params.proj_v)
    heads = []
    for h in range(cfg.n_heads):
        q_h = slice_axis(q_all, 1, h * cfg.d_k, (h + 1) * cfg.d_k)
        k_h = slice_axis(k_all, 1, h * cfg.d_k, (h + 1) * cfg.d_k)
        v_h = slice_axis(v_all, 1, h * cfg.d_v, (h + 1) * cfg.d_v)
        heads.append(attention(q_h, k_h, v_h, kernel=cfg.kernel, scale_qk=cfg.scale_qk))
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return linear(merged, params.proj_out)


@dataclass
class MultiScaleConvConfig:
    kernel_sizes: tuple[int, ...]
    d_model: int
    merge: str = "sum"

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if not self.kernel_sizes:
            raise ValueError("multi-scale conv needs at least one kernel size")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernel_sizes}")
        if self.merge != "sum":
            raise ValueError(f"unsupported merge {self.merge!r}")


@dataclass
class MultiScaleConvParams:
    branches: list[Conv1dParams] = field(default_factory=list)

    @staticmethod
    def init(rng: np.random.Generator, cfg: MultiScaleConvConfig, dtype=None) -> "MultiScaleConvParams":
        return MultiScaleConvParams(
            branches=[Conv1dParams.init(rng, k, cfg.d_model, cfg.d_model, dtype) for k in cfg.kernel_sizes]
        )


def multi_scale_conv(x: Tensor, cfg: MultiScaleConvConfig, params: MultiScaleConvParams) -> Tensor:
    """Parallel same-length conv branches, one per kernel size, summed then relu."""
    out = conv1d(x, params.branches[0])
    for branch in params.branches[1:]:
        out = add(out, conv1d(x, branch))
    return relu(out)


@dataclass
class FeedForwardParams:
    inner: LinearLayer  # d_model -> d_ff
    outer: LinearLayer  # d_ff -> d_model

    @staticmethod
    def init(rng: np.random.Generator, d_model: int, d_ff: int, dtype=None) -> "FeedForwardParams":
        if d_ff < 1:
            raise ShapeError("ffn hidden dim must be >= 1")
        return FeedForwardParams(
            inner=LinearLayer.init(rng, d_model, d_ff, dtype),
            outer=LinearLayer.init(rng, d_ff, d_model, dtype),
        )


def ffn(x: Tensor, params: FeedForwardParams) -> Tensor:
    """relu(x W1 + b1) W2 + b2, row-wise."""
    return linear(relu(linear(x, params.inner)), params.outer)

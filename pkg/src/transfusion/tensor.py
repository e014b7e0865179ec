"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default, float32 optional). Operations
record onto an implicit per-forward-pass tape whenever gradients are enabled
and at least one operand requires them; ``backward`` walks that tape once and
consumes it. Broadcasting is restricted to scalar-vs-tensor; anything else
needs an explicit ``expand``.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Backward was invoked on a missing or already-consumed tape."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite data."""


class TensorFileError(Exception):
    """Base class for tensor (de)serialization failures."""


class MagicError(TensorFileError):
    """Serialized blob does not start with the expected magic bytes."""


class VersionError(TensorFileError):
    """Serialized blob carries an unsupported format version."""


class PayloadError(TensorFileError):
    """Serialized blob is truncated or has trailing garbage."""


_DEFAULT_DTYPE = [np.float64]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype.type in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=_DEFAULT_DTYPE[0])


class Tape:
    """Ordered record of one forward pass; consumed by a single backward."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


_ACTIVE_TAPE: list[Tape | None] = [None]
_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording within the block (inference mode)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    """N-dimensional real array with optional gradient-tape participation.

    Immutable after construction except for the ``grad`` slot. A tensor with
    ``requires_grad=False`` never accumulates gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return id(self.tape) if self.tape is not None else None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routing goes through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absval(self)

    @property
    def T(self):
        return transpose2d(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def create(shape, value=0.0, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor from a shape and either a scalar fill or explicit values."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    n = int(np.prod(shape)) if shape else 1
    dt = dtype or _DEFAULT_DTYPE[0]
    if isinstance(value, (int, float, np.integer, np.floating)):
        data = np.full(shape, float(value), dtype=dt)
    else:
        vals = np.asarray(value, dtype=dt)
        if vals.size != n:
            raise ShapeError(f"shape {shape} needs {n} values, got {vals.size}")
        data = vals.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def record_op(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a tensor, recording a tape node when needed.

    ``backward_fn(g)`` must accumulate into each parent via ``_accumulate``.
    Used by fused layer primitives as well as the local ops below.
    """
    out = Tensor(out_data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = _ACTIVE_TAPE[0]
        if tape is None or tape.consumed:
            tape = Tape()
            _ACTIVE_TAPE[0] = tape
        tape.nodes.append(_Node(out, backward_fn))
        out.tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate leaf gradients for a scalar loss; consumes the tape."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not attached to a live tape (no recorded graph)")
    if tape.consumed:
        raise TapeError("tape already consumed; re-record the forward pass before backward")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)
        node.out.grad = None
    tape.nodes.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        if t.requires_grad:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise primitives


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise TypeError(f"unsupported operand type {type(x).__name__}")


def _fit_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar-vs-tensor is the only sanctioned broadcast
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary_shapes(a, b, name):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
            raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _ew_binary(a, b, fwd, grad_a, grad_b, name):
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, name)
    ad = a.data if isinstance(a, Tensor) else a
    bd = b.data if isinstance(b, Tensor) else b
    out_data = fwd(ad, bd)
    parents = [t for t in (a, b) if isinstance(t, Tensor)]

    def bw(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accumulate(a, _fit_to(np.asarray(grad_a(g, ad, bd)), a.data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accumulate(b, _fit_to(np.asarray(grad_b(g, ad, bd)), b.data.shape))

    return record_op(out_data, parents, bw)


def add(a, b):
    return _ew_binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b):
    return _ew_binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b):
    return _ew_binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b):
    return _ew_binary(
        a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div"
    )


def _ew_unary(t, fwd, grad_fn, name):
    t = _coerce(t)
    if not isinstance(t, Tensor):
        raise TypeError(f"{name} expects a Tensor")
    out_data = fwd(t.data)

    def bw(g):
        _accumulate(t, grad_fn(g, t.data, out_data))

    return record_op(out_data, [t], bw)


def neg(t):
    return _ew_unary(t, lambda x: -x, lambda g, x, y: -g, "neg")


def absval(t):
    # subgradient 0 at the origin, matching d|x|/dx := 0
    return _ew_unary(t, np.abs, lambda g, x, y: g * np.sign(x), "abs")


def relu(t):
    # relu'(0) := 0
    return _ew_unary(t, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0), "relu")


def exp(t):
    return _ew_unary(t, np.exp, lambda g, x, y: g * y, "exp")


def sqrt(t):
    return _ew_unary(t, np.sqrt, lambda g, x, y: g * 0.5 / y, "sqrt")


def elu(t):
    # C1 everywhere: derivative is exp(x) below zero, 1 above, both 1 at 0
    return _ew_unary(
        t,
        lambda x: np.where(x > 0, x, np.expm1(x)),
        lambda g, x, y: g * np.where(x > 0, 1.0, np.exp(x)),
        "elu",
    )


def clamp_min(t, floor: float):
    """max(t, floor) elementwise, built from relu so the subgradient is shared."""
    return add(relu(sub(t, floor)), floor)


# ---------------------------------------------------------------------------
# matmul and reductions


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise TypeError("matmul expects tensors")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return record_op(out_data, [a, b], bw)


def _check_axis(t, axis):
    if axis is not None and not (0 <= axis < t.data.ndim):
        raise ShapeError(f"axis {axis} out of range for rank {t.data.ndim}")


def reduce_sum(t: Tensor, axis=None) -> Tensor:
    _check_axis(t, axis)
    out_data = t.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.data.shape).copy())
        else:
            _accumulate(t, np.broadcast_to(np.expand_dims(g, axis), t.data.shape).copy())

    return record_op(out_data, [t], bw)


def reduce_mean(t: Tensor, axis=None) -> Tensor:
    _check_axis(t, axis)
    n = t.data.size if axis is None else t.data.shape[axis]
    out_data = t.data.mean(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g / n, t.data.shape).copy())
        else:
            _accumulate(t, np.broadcast_to(np.expand_dims(g, axis) / n, t.data.shape).copy())

    return record_op(out_data, [t], bw)


def reduce_max(t: Tensor, axis=None) -> Tensor:
    """Max reduction; gradient routes to the first maximal element per slice."""
    _check_axis(t, axis)
    out_data = t.data.max(axis=axis)
    if axis is None:
        flat_idx = int(t.data.argmax())

        def bw(g):
            mask = np.zeros_like(t.data)
            mask.flat[flat_idx] = 1.0
            _accumulate(t, mask * g)

    else:
        arg = t.data.argmax(axis=axis)

        def bw(g):
            mask = np.zeros_like(t.data)
            np.put_along_axis(mask, np.expand_dims(arg, axis), 1.0, axis=axis)
            _accumulate(t, mask * np.expand_dims(g, axis))

    return record_op(out_data, [t], bw)


def reduce(t: Tensor, axis=None, kind: str = "sum") -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if kind not in fns:
        raise ValueError(f"unknown reduction {kind!r}")
    return fns[kind](t, axis)


# ---------------------------------------------------------------------------
# shape ops (value-preserving index bijections plus explicit expansion)


def transpose2d(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got {t.shape}")
    return record_op(t.data.T.copy(), [t], lambda g: _accumulate(t, g.T))


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if (int(np.prod(shape)) if shape else 1) != t.data.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.data.size} elems) to {shape}")
    old = t.data.shape
    return record_op(t.data.reshape(shape), [t], lambda g: _accumulate(t, g.reshape(old)))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(x) for x in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    rank = tensors[0].data.ndim
    if not (0 <= axis < rank):
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != rank or any(o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise ShapeError(f"concat extents disagree off axis {axis}: {tensors[0].shape} vs {t.shape}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * rank
                idx[axis] = slice(int(start), int(stop))
                _accumulate(t, g[tuple(idx)])

    return record_op(out_data, tensors, bw)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    rank = t.data.ndim
    if not (0 <= axis < rank):
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    extent = t.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice [{start}:{stop}) invalid for extent {extent}")
    idx = [slice(None)] * rank
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        buf = np.zeros_like(t.data)
        buf[idx] = g
        _accumulate(t, buf)

    return record_op(t.data[idx].copy(), [t], bw)


def expand(t: Tensor, shape) -> Tensor:
    """Explicitly broadcast size-1 axes (right-aligned) to ``shape``."""
    shape = tuple(int(s) for s in shape)
    src = t.data.shape
    if len(src) > len(shape):
        raise ShapeError(f"cannot expand {src} to lower-rank {shape}")
    padded = (1,) * (len(shape) - len(src)) + src
    for s, d in zip(padded, shape):
        if s != d and s != 1:
            raise ShapeError(f"cannot expand {src} to {shape}")
    sum_axes = tuple(i for i, (s, d) in enumerate(zip(padded, shape)) if s == 1 and d != 1)

    def bw(g):
        red = g.sum(axis=sum_axes, keepdims=True) if sum_axes else g
        _accumulate(t, red.reshape(src))

    return record_op(np.broadcast_to(t.data.reshape(padded), shape).copy(), [t], bw)


# ---------------------------------------------------------------------------
# softmax


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, computed with max-subtraction."""
    if t.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got {t.shape}")
    if not np.isfinite(t.data).all():
        raise NumericError("softmax_rows requires finite entries")
    shifted = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        # dx = y * (g - sum(g * y, rows))
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(t, out_data * (g - dot))

    return record_op(out_data, [t], bw)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    kink_coords: list = field(default_factory=list)
    eps: float = 1e-5
    tol: float = 1e-4

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        note = f", {len(self.kink_coords)} kink coords excluded" if self.kink_coords else ""
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} over {self.n_coords} coords{note}"


def param_grad_check(loss_fn, param: Tensor, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the autodiff gradient of ``loss_fn()`` wrt ``param`` against
    central finite differences, perturbing ``param.data`` in place.

    ``loss_fn`` is a zero-argument scalar-valued function closing over
    ``param`` (e.g. a model loss closing over one of its weights).
    Coordinates where the one-sided differences disagree (nondifferentiable
    kinks, e.g. relu/abs corners) are flagged and excluded from the pass
    criterion. Relative error uses an absolute floor of 1e-8; non-deterministic
    functions are rejected via a repeated-evaluation probe.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not param.requires_grad:
        raise ValueError("param must require gradients")
    with no_grad():
        base = float(loss_fn().item())
        again = float(loss_fn().item())
    if base != again:
        raise NumericError("grad check: function is not deterministic (repeated evaluation mismatch)")

    param.grad = np.zeros_like(param.data)
    out = loss_fn()
    if out.data.size != 1:
        raise ShapeError("grad check requires a scalar-valued function")
    backward(out)
    analytic = param.grad.reshape(-1).copy()

    flat = param.data.reshape(-1)
    numeric = np.zeros_like(flat)
    kinks: list[int] = []
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().item())
            flat[i] = orig - eps
            fm = float(loss_fn().item())
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
            fwd = (fp - base) / eps
            bwd = (base - fm) / eps
            if abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd), abs(bwd)):
                kinks.append(i)

    denom = np.maximum(1e-8, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    smooth = np.ones(flat.size, dtype=bool)
    smooth[kinks] = False
    max_rel = float(rel[smooth].max()) if smooth.any() else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        passed=max_rel < tol,
        n_coords=int(flat.size),
        kink_coords=kinks,
        eps=eps,
        tol=tol,
    )


def grad_check(f, x: Tensor, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of scalar-valued ``f`` at ``x`` (see
    :func:`param_grad_check` for the comparison policy)."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    return param_grad_check(lambda: f(probe), probe, eps=eps, tol=tol)


# ---------------------------------------------------------------------------
# serialization: "TFTN" records, little-endian

_TFTN_MAGIC = b"TFTN"
_TFTN_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_to_bytes(t: Tensor) -> bytes:
    code = _DTYPE_CODES.get(t.data.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {t.data.dtype}")
    rank = t.data.ndim
    header = _TFTN_MAGIC + struct.pack("<II", _TFTN_VERSION, rank)
    header += struct.pack(f"<{rank}I", *t.data.shape)
    header += struct.pack("<B", code)
    payload = np.ascontiguousarray(t.data, dtype=_CODE_DTYPES[code]).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 4 or buf[:4] != _TFTN_MAGIC:
        raise MagicError("bad tensor magic (expected TFTN)")
    if len(buf) < 12:
        raise PayloadError("truncated tensor header")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != _TFTN_VERSION:
        raise VersionError(f"unsupported tensor format version {version}")
    off = 12
    if len(buf) < off + 4 * rank + 1:
        raise PayloadError("truncated tensor header")
    extents = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    code = buf[off]
    off += 1
    if code not in _CODE_DTYPES:
        raise PayloadError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    n = int(np.prod(extents)) if extents else 1
    expected = n * dt.itemsize
    if len(buf) - off != expected:
        raise PayloadError(f"payload length {len(buf) - off} != expected {expected}")
    data = np.frombuffer(buf[off:], dtype=dt).reshape(extents)
    native = np.float32 if code == 0 else np.float64
    return Tensor(data.astype(native))


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())

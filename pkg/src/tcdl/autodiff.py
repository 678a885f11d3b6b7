"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Operations executed while any input requires a
gradient are recorded on a per-thread tape; ``backward`` replays the tape in
reverse and accumulates gradients into leaves additively. Element type is
float32 or float64 per tensor (float64 exists so finite-difference tests can
be tight; training runs in float32).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names the offending shapes."""


class Node:
    """One executed operation: output tensor, input tensors, backward rule."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations for one thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        """Drop all recorded ops, releasing non-leaf intermediates."""
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tls = threading.local()


def active_tape() -> Tape:
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = Tape()
        _tls.tape = tape
    return tape


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-mode forwards)."""
    prev = _grad_enabled()
    _tls.grad_enabled = False
    try:
        yield
    finally:
        _tls.grad_enabled = prev


@contextmanager
def tape_scope():
    """Run the block on a fresh tape, restoring the previous one after.

    Gradients live on tensors, not the tape, so parameter grads survive the
    scope; intermediates recorded inside are released on exit.
    """
    prev = getattr(_tls, "tape", None)
    _tls.tape = Tape()
    try:
        yield _tls.tape
    finally:
        _tls.tape = prev


class Tensor:
    """Dense multi-dimensional value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like=None) -> Tensor:
    """Promote scalars/arrays to constant tensors, matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _record(out, inputs, backward_fn):
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_tape().record(Node(out, inputs, backward_fn))
    return out


def _accum(tensor, g):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += g


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def backward(loss: Tensor):
    """Backpropagate from a scalar loss through the active tape.

    Every leaf with requires_grad accumulates dLoss/dLeaf (additively across
    calls and across repeated forward executions of the same op).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += np.ones_like(loss.data)
    for node in reversed(active_tape().nodes):
        if node.output.grad is not None:
            node.backward_fn(node.output.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- primitives


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)

    def bw(g):
        _accum(a, -g)

    return _record(out, (a,), bw)


def power(a, p):
    """Elementwise a**p for a constant scalar exponent."""
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _record(out, (a,), bw)


def matmul(a, b):
    """Matrix product; leading batch dimensions broadcast numpy-style."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bw)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2-D, got {a.shape}")
    out = Tensor(a.data.swapaxes(-1, -2))

    def bw(g):
        _accum(a, g.swapaxes(-1, -2))

    return _record(out, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def texp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        _accum(a, g * out.data)

    return _record(out, (a,), bw)


def tlog(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def bw(g):
        _accum(a, g / a.data)

    return _record(out, (a,), bw)


def softmax(a, axis=-1):
    """Stable softmax along ``axis`` (max-subtracted before exponentiation)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    return _record(out, (a,), bw)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _record(out, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype)
    out = Tensor(s)

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _record(out, (a,), bw)


def clamp(a, lo=None, hi=None):
    """Elementwise clip; gradient passes only through the interior."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi

    def bw(g):
        _accum(a, g * inside)

    return _record(out, (a,), bw)


def clamp_min(a, lo):
    return clamp(a, lo=lo)


def index(a, key):
    """Basic (int/slice/tuple) indexing with scatter-add backward."""
    a = as_tensor(a)
    out = Tensor(a.data[key].copy() if isinstance(a.data[key], np.ndarray) else a.data[key])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _record(out, (a,), bw)


def embedding(table, ids):
    """Row lookup: table (V, d), integer ids array -> (..., d)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.data.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _record(out, (table,), bw)


def take_rows(a, idx):
    """Per-batch row selection: a (N, T, d), idx (N,) -> (N, d)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    n = a.data.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"take_rows: index shape {idx.shape} does not match batch {n}")
    rows = np.arange(n)
    out = Tensor(a.data[rows, idx])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accum(a, full)

    return _record(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(out, tuple(tensors), bw)


# ------------------------------------------------------------- composite ops


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale rows (along ``axis``) to unit L2 norm."""
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    norm = power(add(sq, eps), 0.5)
    return div(a, norm)


def layer_norm(x, gamma, beta, dim_mask=None, eps=1e-5):
    """Layer normalization over the last axis with an optional dimension mask.

    With a mask, mean and variance are weighted by the mask so statistics
    cover only unmasked dimensions, and the output is zeroed at masked
    dimensions. With binary masks this matches a physically smaller layer
    exactly; all-ones reduces to standard layer norm.
    """
    if dim_mask is None:
        mu = tmean(x, axis=-1, keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=-1, keepdims=True)
        normed = div(centered, power(add(var, eps), 0.5))
        return add(mul(normed, gamma), beta)
    m = as_tensor(dim_mask)
    denom = tsum(m)
    xm = mul(x, m)
    mu = div(tsum(xm, axis=-1, keepdims=True), denom)
    centered = sub(x, mu)
    var = div(tsum(mul(m, mul(centered, centered)), axis=-1, keepdims=True), denom)
    normed = div(centered, power(add(var, eps), 0.5))
    return mul(add(mul(normed, gamma), beta), m)


def logsumexp(a, axis=-1, keepdims=False):
    # max is held constant; the expression equals logsumexp for any fixed
    # shift, so the gradient (softmax) comes out right.
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = tsum(texp(sub(a, m)), axis=axis, keepdims=keepdims)
    return add(tlog(s), m if keepdims else np.squeeze(m, axis=axis))


# ------------------------------------------------------------ grad checking


def grad_check(f, point: Tensor, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - central| / max(1, |central|). The
    function must be scalar-valued and smooth at ``point``. Non-finite values
    are reported with the offending coordinate index.
    """
    point.data = np.ascontiguousarray(point.data)
    point.requires_grad = True
    point.grad = None
    with tape_scope():
        out = f(point)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        backward(out)
    analytic = point.grad.copy() if point.grad is not None else np.zeros_like(point.data)

    flat = point.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fplus = float(f(point).data)
            flat[i] = orig - step
            fminus = float(f(point).data)
            flat[i] = orig
            numeric[i] = (fplus - fminus) / (2.0 * step)
            if not np.isfinite(numeric[i]):
                raise FloatingPointError(f"non-finite central difference at coordinate {i}")
    numeric = numeric.reshape(point.data.shape)
    if not np.all(np.isfinite(analytic)):
        bad = int(np.argmax(~np.isfinite(analytic.reshape(-1))))
        raise FloatingPointError(f"non-finite analytic gradient at coordinate {bad}")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0

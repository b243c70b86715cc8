"""Reverse-mode automatic differentiation over numpy arrays.

A dynamic tape: every operation appends one node in construction order, and
``backward`` walks the tape in reverse so each node's backward rule runs
exactly once.  The tape is module-global and rebuilt every training step;
call ``reset_tape`` between steps.

Values are float32 by default.  Reductions (sum, mean) accumulate in float64
before casting back.  ``using_dtype(np.float64)`` switches the default dtype,
which gradient-checking tests use to keep the finite-difference oracle out of
float32 noise.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_TAPE: list["_Node"] = []
_RECORDING = True


class FiniteError(ArithmeticError):
    """An operation produced a NaN or Inf value."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure forward values)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def reset_tape():
    _TAPE.clear()


def tape_size() -> int:
    return len(_TAPE)


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out, parents, grad_fn):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Tensor:
    """A numpy array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        # shares the buffer; cuts the graph
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every op lives at module level
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def logsigmoid(self):
        return logsigmoid(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)

    def transpose(self):
        return transpose(self)


def parameter(data) -> Tensor:
    """Wrap an array as a trainable leaf."""
    return Tensor(data, requires_grad=True)


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op: str):
    if not np.all(np.isfinite(arr)):
        raise FiniteError(f"{op} produced a non-finite value")


def _make(out_data, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _RECORDING and any(p.requires_grad for p in parents)
    if out.requires_grad:
        _TAPE.append(_Node(out, tuple(parents), grad_fn))
    return out


def _accumulate(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Propagate d(loss)/d(x) into .grad of every reachable tensor.

    Each call contributes exactly one pass worth of gradient; .grad
    accumulates across calls until zeroed, so running backward twice on the
    same graph doubles it.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any trainable tensor")
    # per-pass gradients live in a scratch map so earlier passes can't leak in
    flow: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    # reverse construction order is a valid topological order
    for node in reversed(_TAPE):
        entry = flow.get(id(node.out))
        if entry is None:
            continue
        grads = node.grad_fn(entry[1])
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            held = flow.get(key)
            if held is None:
                flow[key] = [parent, np.array(g, dtype=parent.data.dtype, copy=True)]
            else:
                held[1] = held[1] + g
    for tensor, g in flow.values():
        _accumulate(tensor, g)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), grad_fn, "mul")


def neg(a) -> Tensor:
    a = ensure_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def log(a) -> Tensor:
    a = ensure_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn, "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clip keeps exp in range; sigmoid saturates there anyway
    z = np.clip(x, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid(a) -> Tensor:
    a = ensure_tensor(a)
    s = _sigmoid(a.data)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), grad_fn, "sigmoid")


def logsigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed stably; safe for large negative x."""
    a = ensure_tensor(a)
    out = -np.logaddexp(np.zeros_like(a.data), -a.data)

    def grad_fn(g):
        return (g * _sigmoid(-a.data),)

    return _make(out, (a,), grad_fn, "logsigmoid")


def square(a) -> Tensor:
    a = ensure_tensor(a)

    def grad_fn(g):
        return (g * 2.0 * a.data,)

    return _make(a.data * a.data, (a,), grad_fn, "square")


def sqrt(a) -> Tensor:
    a = ensure_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt requires non-negative input")
    out = np.sqrt(a.data)

    def grad_fn(g):
        # subgradient 0 at x == 0, same convention as relu
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make(out, (a,), grad_fn, "sqrt")


def cos(a) -> Tensor:
    a = ensure_tensor(a)

    def grad_fn(g):
        return (-g * np.sin(a.data),)

    return _make(np.cos(a.data), (a,), grad_fn, "cos")


def sin(a) -> Tensor:
    a = ensure_tensor(a)

    def grad_fn(g):
        return (g * np.cos(a.data),)

    return _make(np.sin(a.data), (a,), grad_fn, "sin")


def relu(a) -> Tensor:
    a = ensure_tensor(a)
    mask = a.data > 0  # subgradient 0 at exactly 0

    def grad_fn(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), grad_fn, "relu")


def clamp_min(a, floor: float) -> Tensor:
    a = ensure_tensor(a)
    mask = a.data > floor

    def grad_fn(g):
        return (g * mask,)

    return _make(np.maximum(a.data, floor), (a,), grad_fn, "clamp_min")


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, cast back to the working dtype)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = ensure_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.data.dtype)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)

    return _make(out, (a,), grad_fn, "sum")


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = ensure_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.data.dtype)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).astype(a.data.dtype),)

    return _make(out, (a,), grad_fn, "mean")


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    a = ensure_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")

    def grad_fn(g):
        return (g.T,)

    return _make(a.data.T.copy(), (a,), grad_fn, "transpose")


def softmax(a, axis=-1) -> Tensor:
    a = ensure_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), grad_fn, "softmax")


def gather_rows(table, indices) -> Tensor:
    """Select rows by integer index; the gradient scatter-adds back.

    Repeated indices are fine, their gradients sum.
    """
    table = ensure_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def grad_fn(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(out, (table,), grad_fn, "gather_rows")


def scatter_rows(src, indices, n_rows: int) -> Tensor:
    """Place rows of src at the given (unique) positions of a zero matrix."""
    src = ensure_tensor(src)
    idx = np.asarray(indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows requires unique indices")
    out = np.zeros((n_rows,) + src.data.shape[1:], dtype=src.data.dtype)
    out[idx] = src.data

    def grad_fn(g):
        return (g[idx],)

    return _make(out, (src,), grad_fn, "scatter_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = ensure_tensor(a)
    if a.ndim != 2:
        raise ValueError("slice_cols expects a 2-d tensor")
    out = a.data[:, start:stop].copy()

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        buf[:, start:stop] = g
        return (buf,)

    return _make(out, (a,), grad_fn, "slice_cols")


def element(a, index: int) -> Tensor:
    """Pick one element of a 1-d tensor as a scalar tensor."""
    a = ensure_tensor(a)
    if a.ndim != 1:
        raise ValueError("element expects a 1-d tensor")
    out = np.asarray(a.data[index])

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return _make(out, (a,), grad_fn, "element")


def stack_scalars(parts: Iterable[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d vector."""
    parts = [ensure_tensor(p) for p in parts]
    for p in parts:
        if p.data.size != 1:
            raise ValueError("stack_scalars expects scalar tensors")
    out = np.array([float(p.data) for p in parts], dtype=_DTYPE)

    def grad_fn(g):
        return tuple(np.asarray(g[i], dtype=p.data.dtype).reshape(p.data.shape) for i, p in enumerate(parts))

    return _make(out, tuple(parts), grad_fn, "stack_scalars")

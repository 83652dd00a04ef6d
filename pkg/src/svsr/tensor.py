"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous float32 or float64 numpy buffer. Ops
record their inputs and a backward closure on the output node; the resulting
DAG is the gradient tape. :func:`backward` walks it once in reverse
topological order and accumulates gradients into every ``requires_grad``
node.

Precision is a per-tensor property: float32 is the training default, float64
exists for finite-difference gradient checking. Mixing the two in one op is
an error rather than a silent upcast.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in FLOAT_DTYPES:
            raise TypeError(f"tensors are float32/float64, got {arr.dtype}")
        # note: np.ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def strides(self) -> tuple:
        """Element (not byte) strides of the underlying buffer."""
        return tuple(s // self.data.itemsize for s in self.data.strides)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def astype(self, dtype) -> "Tensor":
        """Detached copy in the given precision."""
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def abs(self):
        return tabs(self)

    def exp(self):
        return texp(self)

    def sqrt(self):
        return tsqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _scalar_err(t):
    raise ValueError(f"item() needs a scalar tensor, got shape {t.shape}")


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed precision operands: {a.dtype} vs {b.dtype}")


def from_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result, recording the graph edge when grads are enabled.

    ``backward(grad_out)`` must return one gradient array (or None) per
    parent, already shaped like that parent's data.
    """
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ops ---------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)
    return from_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)
    return from_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)
    return from_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape),
                              unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float32))
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b)
    out = a.data / b.data

    def backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * out / b.data, b.shape))

    return from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,))


# -- elementwise unary ops ------------------------------------------------


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: (g * (0.5 / out),))


def activation(a: Tensor, kind: str) -> Tensor:
    """relu, leaky_relu (slope 0.1) or sigmoid."""
    x = a.data
    if kind == "relu":
        out = np.maximum(x, 0)
        local = (x > 0).astype(x.dtype)
    elif kind == "leaky_relu":
        out = np.where(x > 0, x, x * x.dtype.type(0.1))
        local = np.where(x > 0, x.dtype.type(1.0), x.dtype.type(0.1))
    elif kind == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-x))
        local = out * (1.0 - out)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return from_op(out, (a,), lambda g: (g * local,))


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def leaky_relu(a: Tensor) -> Tensor:
    return activation(a, "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with prob `rate`, scale survivors by 1/(1-rate).

    Identity when rate == 0 or in eval mode; the mask comes from the caller's
    named stream so runs stay reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return from_op(a.data.copy(), (a,), lambda g: (g,))
    keep = (rng.random(a.shape) >= rate)
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(a.dtype) * a.dtype.type(scale)
    return from_op(a.data * mask, (a,), lambda g: (g * mask,))


# -- reductions -----------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return from_op(np.asarray(out, dtype=a.dtype), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return from_op(np.ascontiguousarray(out), (a,), backward)


# -- matmul / softmax ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return from_op(out, (a, b), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along `axis`; rows sum to 1."""
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return from_op(out, (a,), backward)


# -- backward pass ---------------------------------------------------------


def topo_order(root: Tensor) -> list:
    """Nodes reachable from `root`, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    Each recorded op's backward closure runs exactly once, in reverse
    topological order. Gradients accumulate (+=) into existing .grad.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# -- constructors ------------------------------------------------------------


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

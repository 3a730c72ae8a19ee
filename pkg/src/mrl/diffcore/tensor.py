"""Dense tensors with dynamic-graph reverse-mode differentiation.

Every operation records a closure that maps the output gradient to the
gradients of its inputs. ``Tensor.backward`` walks the recorded graph in
reverse topological order. Operations never mutate their operands, so grad
buffers may safely alias one another.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _sum_leading(x: np.ndarray, n: int) -> np.ndarray:
    """Sum over the first ``n`` axes. A GEMV against ones beats ufunc.reduce several-fold."""
    rest = x.shape[n:]
    flat = x.reshape(-1, int(np.prod(rest, dtype=np.int64)))
    return (np.ones(flat.shape[0], dtype=x.dtype) @ flat).reshape(rest)


def _sum_last(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keeping it as extent 1."""
    return (x @ np.ones(x.shape[-1], dtype=x.dtype))[..., None]


try:
    import numba

    @numba.njit(cache=True)
    def _rowmax_kernel(a):  # pragma: no cover - compiled
        n, m = a.shape
        out = np.empty((n, 1), a.dtype)
        for i in range(n):
            v = a[i, 0]
            for j in range(1, m):
                if a[i, j] > v:
                    v = a[i, j]
            out[i, 0] = v
        return out
except ImportError:  # pragma: no cover
    _rowmax_kernel = None


def _max_last(x: np.ndarray) -> np.ndarray:
    """Max over the last axis, keeping it. ufunc.reduce is slow on short rows."""
    if _rowmax_kernel is None or x.ndim < 2 or x.shape[-1] == 0:
        return x.max(axis=-1, keepdims=True)
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    return _rowmax_kernel(flat).reshape(x.shape[:-1] + (1,))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = _sum_leading(grad, extra)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional f32/f64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other, self), self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    # differentiation ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t.

        Gradients add onto existing buffers, so two calls without zeroing
        leave exactly twice the single-pass gradient.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor with requires_grad=True")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        grads = {id(self): seed}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _DTYPES else np.float64
    return Tensor(arr, dtype=dtype)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data ** p, (a,), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _node(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


# reductions and layout ----------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {exc}") from None
    return _node(data, tensors, backward)


# linear algebra and normalisation ----------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a = _lift(a, b) if isinstance(b, Tensor) else as_tensor(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError("softmax received non-finite input")
    last = axis in (-1, x.ndim - 1)

    def total(a):
        return _sum_last(a) if last else a.sum(axis=axis, keepdims=True)

    peak = _max_last(x.data) if last else x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - peak)
    y = e / total(e)

    def backward(g):
        return (y * (g - total(g * y)),)

    return _node(y, (x,), backward)


def layer_normalize(x: Tensor, axis: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise ``x`` to zero mean / unit variance along ``axis``, then scale and shift."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if n < 1:
        raise ShapeError("layer_normalize axis has extent 0")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    g_ = gain.data.reshape(bshape)
    last = axis == x.ndim - 1

    def avg(a):
        return _sum_last(a) * (1.0 / n) if last else a.mean(axis=axis, keepdims=True)

    def total(a):
        if last:
            return _sum_leading(a, a.ndim - 1)
        return a.sum(axis=tuple(i for i in range(a.ndim) if i != axis))

    centred = x.data - avg(x.data)
    inv = 1.0 / np.sqrt(avg(centred * centred) + eps)
    xhat = centred * inv

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * g_
            gx = inv * (dxhat - avg(dxhat) - xhat * avg(dxhat * xhat))
        if gain.requires_grad:
            ggain = total(g * xhat)
        if bias.requires_grad:
            gbias = total(g)
        return gx, ggain, gbias

    return _node(xhat * g_ + bias.data.reshape(bshape), (x, gain, bias), backward)

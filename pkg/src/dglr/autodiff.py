"""Reverse-mode automatic differentiation over numpy arrays.

A small tape engine: each operation stores its parent tensors and a closure
mapping the output gradient to parent gradients. Everything is float64 so
analytic gradients can be checked against central finite differences at
tight tolerances. Operations on inputs that do not require gradients are
pruned from the tape, which keeps constant-heavy graphs cheap.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "dot_last",
    "reduce_sum",
    "reshape",
    "transpose_last2",
    "getitem",
    "concat",
    "stack",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "elu",
    "clip",
    "masked_softmax",
]


def _as_data(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_data(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    # backprop ---------------------------------------------------------
    def backward(self):
        """Backpropagate from a scalar output, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output tensor")
        if not self.requires_grad:
            raise ValueError("output does not depend on any parameter")
        self.grad = np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            fn = node._backward
            if fn is None:
                continue
            grads = fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; recursion would overflow on long recurrent
    # chains (one tape node per time step per gate).
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _op(data, parents, backward) -> Tensor:
    for p in parents:
        if p.requires_grad:
            out = Tensor(data, requires_grad=True)
            out._parents = parents
            out._backward = backward
            return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _op(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _op(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _op(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * out / b.data, b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _op(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _op(-a.data, (a,), backward)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting (operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _op(a.data @ b.data, (a, b), backward)


def dot_last(x, v):
    """Contract the last axis of ``x`` with the vector ``v``."""
    x, v = as_tensor(x), as_tensor(v)
    if v.data.ndim != 1 or x.data.shape[-1] != v.data.shape[0]:
        raise ValueError("dot_last expects x[..., k] and v[k]")
    out = x.data @ v.data

    def backward(g):
        gx = gv = None
        if x.requires_grad:
            gx = g[..., None] * v.data
        if v.requires_grad:
            gv = (g[..., None] * x.data).reshape(-1, v.data.shape[0]).sum(axis=0)
        return gx, gv

    return _op(out, (x, v), backward)


# -- shape manipulation ---------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.data.shape),)

    return _op(out, (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _op(x.data.reshape(shape), (x,), backward)


def transpose_last2(x):
    x = as_tensor(x)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _op(np.swapaxes(x.data, -1, -2), (x,), backward)


def getitem(x, idx):
    """Basic (integer / slice / tuple) indexing; advanced indexing is not taped."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _op(x.data[idx], (x,), backward)


def concat(parts, axis=-1):
    ts = tuple(as_tensor(p) for p in parts)
    datas = [t.data for t in ts]
    out = np.concatenate(datas, axis=axis)
    split_at = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        pieces = np.split(g, split_at, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _op(out, ts, backward)


def stack(parts, axis=0):
    ts = tuple(as_tensor(p) for p in parts)
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, i, axis=axis) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _op(out, ts, backward)


# -- elementwise nonlinearities -------------------------------------------


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _op(out, (x,), backward)


def log(x):
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    return _op(np.log(x.data), (x,), backward)


def _expit(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _op(out, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _op(out, (x,), backward)


def relu(x):
    x = as_tensor(x)

    def backward(g):
        return (g * (x.data > 0),)

    return _op(np.maximum(x.data, 0.0), (x,), backward)


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(pos, 1.0, slope),)

    return _op(out, (x,), backward)


def elu(x, alpha=1.0):
    x = as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0.0)))

    def backward(g):
        return (g * np.where(pos, 1.0, out + alpha),)

    return _op(out, (x,), backward)


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is passed through strictly inside the range."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        return (g * inside,)

    return _op(np.clip(x.data, lo, hi), (x,), backward)


def masked_softmax(logits, mask, axis=-1):
    """Softmax over the True entries of ``mask``; masked outputs are exactly 0.

    Every slice along ``axis`` must contain at least one True entry.
    """
    lt = as_tensor(logits)
    m = np.asarray(mask, dtype=bool)
    if m.shape != lt.data.shape:
        raise ValueError("mask shape must match logits")
    if not m.any(axis=axis).all():
        raise ValueError("masked_softmax: a slice has empty support")
    z = np.where(m, lt.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if not lt.requires_grad:
            return (None,)
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _op(out, (lt,), backward)

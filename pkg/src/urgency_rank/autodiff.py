"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable op records a node on the active :class:`Tape`. A tape is
thread-local, so independent shards can build graphs concurrently against the
same (read-only) parameter tensors. Gradients are returned as a map keyed by
tensor identity rather than written onto the tensors.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)[x]
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Node:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only op record; nodes are appended in execution (topological) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def release(self) -> None:
        """Drop the recorded graph.

        Recorded tensors point back at their tape, so a graph is a reference
        cycle; releasing it lets memory go immediately instead of at the next
        cyclic collection.
        """
        self.nodes.clear()

    def record(self, inputs, output, vjp) -> None:
        output._tape = self
        self.nodes.append(Node(tuple(inputs), output, vjp))

    def backward(self, root: "Tensor") -> dict["Tensor", np.ndarray]:
        """Gradients of scalar ``root`` w.r.t. every leaf tensor with requires_grad."""
        if root.data.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not None and root._tape is not self:
            raise TapeError("root was recorded on a different tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        if root.requires_grad and root._tape is None:
            leaves[id(root)] = root
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is None:
                    leaves[key] = inp
        return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


def backward(root: "Tensor") -> dict["Tensor", np.ndarray]:
    """Run the backward pass on the tape that produced ``root``."""
    if root.data.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        return {root: np.ones_like(root.data)} if root.requires_grad else {}
    return root._tape.backward(root)


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation.

    Tensors are treated as immutable once created. Identity (not value) is used
    for hashing so a tensor can key a gradient map.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(inputs, out, vjp)
    return out


def custom_op(data, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Record an op with a hand-written ``vjp(g) -> tuple of input gradients``."""
    return _make(np.asarray(data, dtype=np.float64), tuple(as_tensor(t) for t in inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                # weight matrix shared across leading axes: one flattened GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


# elementwise unary


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(-np.logaddexp(0.0, -x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * np.exp(-np.logaddexp(0.0, -x.data)),))


def prelu(x, slope) -> Tensor:
    """x where x >= 0, slope * x elsewhere; ``slope`` broadcasts over the last axis."""
    x, slope = as_tensor(x), as_tensor(slope)
    neg = x.data < 0
    out = np.where(neg, slope.data * x.data, x.data)

    def vjp(g):
        gx = np.where(neg, g * slope.data, g) if x.requires_grad else None
        gs = _unbroadcast(np.where(neg, g * x.data, 0.0), slope.shape) if slope.requires_grad else None
        return gx, gs

    return _make(out, (x, slope), vjp)


def pairwise_prelu_score(u, v, bias, slope, w) -> Tensor:
    """``out[b, i, j] = prelu(u[b, j] + v[b, i] + bias, slope) . w``, shape (B, I, J).

    ``u`` is (B, J, a), ``v`` is (B, I, a), the rest are (a,). Equivalent to
    composing add, prelu and a dot product, but the (B, I, J, a) activation is
    built once and the backward pass needs no intermediate graph.
    """
    u, v, bias, slope, w = map(as_tensor, (u, v, bias, slope, w))
    a = u.shape[-1]
    for t in (bias, slope, w):
        if t.shape != (a,):
            raise ShapeError(f"pairwise_prelu_score: expected ({a},) vectors, got {t.shape}")
    if v.shape[-1] != a or u.shape[0] != v.shape[0]:
        raise ShapeError(f"pairwise_prelu_score: incompatible {u.shape} and {v.shape}")
    pre = u.data[:, None, :, :] + v.data[:, :, None, :] + bias.data
    neg = pre < 0
    hidden = np.where(neg, slope.data * pre, pre)
    # the product-sum keeps every output independent of its neighbours' position
    out = (hidden * w.data).sum(axis=-1)

    def vjp(g):
        d_pre = g[..., None] * np.where(neg, slope.data * w.data, w.data)
        flat_g = g.reshape(-1)
        gu = d_pre.sum(axis=1)
        gv = d_pre.sum(axis=2)
        gb = gu.sum(axis=(0, 1))
        gs = w.data * (flat_g @ np.where(neg, pre, 0.0).reshape(-1, a))
        gw = flat_g @ hidden.reshape(-1, a)
        return gu, gv, gb, gs, gw

    return _make(out, (u, v, bias, slope, w), vjp)


# reductions and shape ops


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x, key) -> Tensor:
    """``x[key]`` for basic or integer-array keys; gradient scatter-adds back."""
    x = as_tensor(x)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), vjp)


def embedding(table, ids) -> Tensor:
    """Row gather ``table[ids]``; output shape ``ids.shape + (dim,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")

    def vjp(g):
        flat = g.reshape(-1, table.shape[1])
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), flat)
        return (gt,)

    return _make(table.data[ids], (table,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, vjp)


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    The max used for stabilization is taken over unmasked entries only, so
    garbage in padded positions never leaks into the result.
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("masked_softmax: a row has no unmasked position")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), vjp)


def softmax(logits) -> Tensor:
    return masked_softmax(logits, np.ones(as_tensor(logits).shape, dtype=bool))

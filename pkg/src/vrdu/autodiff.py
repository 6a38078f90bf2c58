"""Minimal dense-tensor engine with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array; every operation that produces a Tensor
records its parents and a backward closure, forming an implicit tape.
Calling :func:`backward` on a scalar node walks the tape in reverse
topological order and accumulates gradients (+=) into every leaf with
``requires_grad`` set. ``Parameter`` is a named leaf whose gradient buffer
is zero-initialized and persists across backward calls.

All math is float64 by default; float32 data is accepted for faster
training runs. Broadcasting follows numpy semantics, with gradients
summed back over broadcast dimensions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from vrdu import kernels

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (for eval passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # operator sugar
    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def backward(g):
        acc = np.zeros(shape, dtype=g.dtype)
        if (
            isinstance(idx, np.ndarray)
            and idx.ndim == 1
            and idx.dtype.kind in "iu"
            and acc.ndim == 2
        ):
            kernels.scatter_add_rows(acc, idx.astype(np.int64), np.ascontiguousarray(g))
        else:
            np.add.at(acc, idx, g)
        return (acc,)

    return _make(a.data[idx], (a,), backward)


def take_rows(a, ids) -> Tensor:
    """Row gather for embedding lookups; ids is a 1D integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    return getitem(_wrap(a), ids)


def gather_pair(a, rows, cols) -> Tensor:
    """out[i, j] = a[rows[i, j], cols[i, j]]; the relative-position gather."""
    a = _wrap(a)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        acc = np.zeros(shape, dtype=g.dtype)
        kernels.scatter_add_pair(acc, rows, cols, np.ascontiguousarray(g))
        return (acc,)

    return _make(kernels.gather_pair(a.data, rows, cols), (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log; with eps > 0 the argument is clamped below at eps."""
    a = _wrap(a)
    x = np.maximum(a.data, eps) if eps else a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    a = _wrap(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _make(x * phi, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)

    return _make(out_data, (a,), backward)


def dropout(a, rate: float, stream) -> Tensor:
    """Inverted dropout driven by a named RngStream; identity at rate 0."""
    if rate <= 0.0:
        return _wrap(a)
    a = _wrap(a)
    keep = (stream.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# composites


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    y = div(xc, sqrt(var + eps))
    return add(mul(y, gamma), beta)


def log_softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    m = Tensor(a.data.max(axis=axis, keepdims=True))  # detached shift
    z = a - m
    return z - log(tsum(exp(z), axis=axis, keepdims=True))


def cross_entropy(logits, target_dist, reduction: str = "mean") -> Tensor:
    """-sum target * log softmax(logits) per row, then mean or sum."""
    target_dist = np.asarray(target_dist if not isinstance(target_dist, Tensor) else target_dist.data)
    logp = log_softmax(logits, axis=-1)
    per_row = neg(tsum(mul(logp, Tensor(target_dist)), axis=-1))
    if reduction == "mean":
        return tmean(per_row)
    if reduction == "sum":
        return tsum(per_row)
    raise ValueError(f"unknown reduction {reduction!r}")


def binary_cross_entropy(probs, labels, reduction: str = "mean", eps: float = 1e-12) -> Tensor:
    labels = np.asarray(labels if not isinstance(labels, Tensor) else labels.data, dtype=np.float64)
    probs = _wrap(probs)
    pos = mul(log(probs, eps=eps), Tensor(labels))
    negt = mul(log(1.0 - probs, eps=eps), Tensor(1.0 - labels))
    per = neg(add(pos, negt))
    if reduction == "mean":
        return tmean(per)
    if reduction == "sum":
        return tsum(per)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss, accumulating into leaf grads."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

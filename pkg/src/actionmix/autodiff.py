"""Reverse-mode automatic differentiation over small dense float64 arrays.

Every operation eagerly computes a numpy value and, when any input requires
gradients (and recording is enabled), stores its parents plus a closure that
maps the output gradient to per-parent gradient contributions.
``Tensor.backward()`` replays those closures in reverse topological order.

The op set is exactly what the detector needs, nothing more. Two details are
deliberate and load-bearing:

* All data is float64 and every op output is checked for NaN/Inf (a
  ``NonFiniteError`` is raised, never propagated silently). The check can be
  disabled via ``finite_checks(False)`` for hot loops that are known clean.
* ``softmax`` and ``matmul`` accept ``stable_sum=True``, which sorts the
  reduced values before summing. A permutation of the operands then yields
  the identical sorted sequence, hence the identical float result;
  attention uses this so that permuting the rows of a key/value set changes
  nothing, bit for bit.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, NonFiniteError, ShapeError

_LN2 = math.log(2.0)

_GRAD_ENABLED = [True]
_FINITE_CHECKS = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (values only, no backward)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextmanager
def finite_checks(enabled: bool):
    """Override the per-op NaN/Inf check inside the block."""
    _FINITE_CHECKS.append(bool(enabled))
    try:
        yield
    finally:
        _FINITE_CHECKS.pop()


class Tensor:
    """A dense float64 array plus an optional place in a recorded graph.

    ``dims`` is the shape, ``data`` the row-major numpy buffer, ``grad`` the
    accumulated gradient (allocated lazily by ``backward``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS[-1] and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- introspection -------------------------------------------------

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got dims {self.dims}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the value."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    # -- graph ----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ShapeError("backward() is defined for scalar outputs only")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, contrib in zip(node._parents, node._backward(node.grad)):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib

    # -- operator sugar ---------------------------------------------------

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

    def __getitem__(self, key):
        return getitem(self, key)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording parents/backward when gradients flow.

    ``backward(g)`` must return one gradient array (or None) per parent.
    Exposed so other modules can define custom primitives (e.g. the feature
    gather) without touching this file.
    """
    requires = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def lazy_composite(value: np.ndarray, inputs: Sequence[Tensor], builder) -> Tensor:
    """A fused op: precomputed forward, backward by differentiating a rebuilt
    op graph.

    ``value`` must equal ``builder(*inputs)`` (computed by any fast route);
    ``builder`` receives fresh leaf tensors carrying the inputs' data and
    must re-derive the same function from autodiff ops. Gradient cost is
    paid only when a backward pass actually reaches this op, so hot
    no-grad evaluations run at plain-numpy speed.
    """
    inputs = tuple(inputs)

    def backward(g):
        leaves = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
        rebuilt = builder(*leaves)
        if rebuilt.dims != np.shape(g):
            raise ShapeError(
                f"lazy composite rebuilt dims {rebuilt.dims} != value dims {np.shape(g)}"
            )
        seed = tsum(mul(rebuilt, Tensor(np.asarray(g))))
        seed.backward()
        return tuple(leaf.grad for leaf in leaves)

    return make_op(np.asarray(value, dtype=np.float64), inputs, backward)


# -- broadcasting helpers ---------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unbroadcast_matrix(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Like _unbroadcast but the trailing two axes are matrix axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape[:-2]) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return make_op(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = astensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def _ordered_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Sum after sorting along ``axis``: permuting the operands along that
    axis permutes nothing after the sort, so the result is bit-stable."""
    return np.sort(values, axis=axis).sum(axis=axis)


def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """matmul whose contraction is an ordered (sort-then-sum) reduction."""
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("stable matmul does not broadcast batch dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    products = a[..., :, :, None] * b[..., None, :, :]
    return _ordered_sum(products, axis=-2)


def matmul(a, b, stable_sum: bool = False) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dims")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}"
        )
    data = _ordered_matmul(a.data, b.data) if stable_sum else np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            _unbroadcast_matrix(ga, a.data.shape),
            _unbroadcast_matrix(gb, b.data.shape),
        )

    return make_op(data, (a, b), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    return make_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def transpose(a, axes) -> Tensor:
    a = astensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(
        np.asarray(a.data.transpose(axes), order="C"),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def swap_last_two(a) -> Tensor:
    a = astensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    return make_op(
        np.asarray(np.broadcast_to(a.data, shape), order="C").copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.data.shape),),
    )


def getitem(a, key) -> Tensor:
    a = astensor(a)
    data = np.array(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return make_op(data, (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return make_op(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]

    def backward(g):
        parts = np.split(g, len(ts), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return make_op(np.stack([t.data for t in ts], axis=axis), ts, backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return make_op(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- elementwise nonlinearities ------------------------------------------------


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = astensor(a)
    data = np.exp(a.data)
    return make_op(data, (a,), lambda g: (g * data,))


def exp2(a) -> Tensor:
    """2**x, the box-size decoding primitive."""
    a = astensor(a)
    data = np.exp2(a.data)
    return make_op(data, (a,), lambda g: (g * data * _LN2,))


def log(a) -> Tensor:
    a = astensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    data = np.sqrt(a.data)
    return make_op(data, (a,), lambda g: (g * 0.5 / data,))


def power(a, exponent: float) -> Tensor:
    a = astensor(a)
    data = a.data**exponent
    return make_op(
        data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),)
    )


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return make_op(data, (a,), lambda g: (g * data * (1.0 - data),))


def tabs(a) -> Tensor:
    a = astensor(a)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes inside the closed interval."""
    a = astensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    take_a = a.data < b.data
    tie = a.data == b.data

    def backward(g):
        ga = g * (take_a + 0.5 * tie)
        gb = g * (~take_a & ~tie) + g * 0.5 * tie
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return make_op(np.minimum(a.data, b.data), (a, b), backward)


def maximum(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    take_a = a.data > b.data
    tie = a.data == b.data

    def backward(g):
        ga = g * (take_a + 0.5 * tie)
        gb = g * (~take_a & ~tie) + g * 0.5 * tie
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return make_op(np.maximum(a.data, b.data), (a, b), backward)


def softmax(a, axis: int = -1, stable_sum: bool = False) -> Tensor:
    """Softmax along ``axis``; rows sum to one.

    ``stable_sum=True`` computes the normalizer with an exactly rounded sum,
    so the result is invariant under permutations along ``axis``.
    """
    a = astensor(a)
    if a.data.shape[axis] < 1:
        raise ShapeError("softmax axis must have extent >= 1")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if stable_sum:
        denom = np.expand_dims(_ordered_sum(e, axis=axis), axis)
    else:
        denom = e.sum(axis=axis, keepdims=True)
    y = e / denom

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return make_op(y, (a,), backward)


def layer_norm_affine(x, gain, bias, eps: float) -> Tensor:
    """Standardize the last axis then scale/shift: ((x - mu)/sqrt(var + eps)) * gain + bias.

    ``gain`` and ``bias`` broadcast against the normalized values. One fused
    primitive (this sits on every hot path).
    """
    if eps <= 0:
        raise InputError("layer_norm eps must be positive")
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = y * gain.data + bias.data

    def backward(g):
        gy = g * gain.data
        mean_gy = gy.mean(axis=-1, keepdims=True)
        mean_gyy = (gy * y).mean(axis=-1, keepdims=True)
        gx = inv * (gy - mean_gy - y * mean_gyy)
        ggain = _unbroadcast(g * y, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return (gx, ggain, gbias)

    return make_op(out, (x, gain, bias), backward)


def floor_index(a: Tensor) -> np.ndarray:
    """Integer floor of the values, as a plain int array (no gradient)."""
    return np.floor(a.data).astype(np.int64)

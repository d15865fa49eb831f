"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float64 array and remembers the op that produced it.
Calling :func:`backward` on a scalar tensor walks the graph once in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.

Every op in this module also accepts plain ``np.ndarray`` inputs and then
returns a plain array, so model code written against these functions runs
unchanged (and fast) in inference mode.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteGradientError(FloatingPointError):
    """Raised when backpropagation produces a NaN or infinite gradient."""

    def __init__(self, op: str):
        super().__init__(f"non-finite gradient produced by op '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: str | None = None,
        *,
        _parents: tuple = (),
        _backward: Callable | None = None,
        _op: str = "leaf",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    def __len__(self) -> int:
        return len(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.value

    # operator sugar
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def value_of(x) -> np.ndarray:
    if type(x) is Tensor:
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents: tuple, backward: Callable, op: str) -> Tensor:
    return Tensor(value, requires_grad=True, _parents=parents, _backward=backward, _op=op)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    if type(a) is not Tensor and type(b) is not Tensor:
        return np.add(a, b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)

    def back(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _node(out, (a, b), back, "add")


def sub(a, b):
    if type(a) is not Tensor and type(b) is not Tensor:
        return np.subtract(a, b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)

    def back(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return _node(out, (a, b), back, "sub")


def mul(a, b):
    if type(a) is not Tensor and type(b) is not Tensor:
        return np.multiply(a, b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _node(out, (a, b), back, "mul")


def div(a, b):
    if type(a) is not Tensor and type(b) is not Tensor:
        return np.true_divide(a, b, dtype=np.float64)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)

    def back(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _node(out, (a, b), back, "div")


def neg(a):
    if not _tracked(a):
        return -value_of(a) if not isinstance(a, Tensor) else Tensor(-a.value)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float):
    av = value_of(a)
    out = av**exponent
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    return _node(out, (a,), lambda g: (g * exponent * av ** (exponent - 1),), "power")


def _unary(a, fn, dfn, op):
    """Elementwise op; ``dfn(x, out)`` gives the local derivative."""
    if type(a) is not Tensor:
        return fn(np.asarray(a, dtype=np.float64))
    av = a.value
    out = fn(av)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    return _node(out, (a,), lambda g: (g * dfn(av, out),), op)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(a):
    return _unary(a, expit, lambda x, y: y * (1.0 - y), "sigmoid")


def softplus(a):
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, x),
        lambda x, y: expit(x),
        "softplus",
    )


def _log_expm1(x):
    big = x > 30.0
    safe = np.where(big, 1.0, x)
    return np.where(big, x, np.log(np.expm1(safe)))


def log_expm1(a):
    """``log(exp(a) - 1)`` for ``a > 0``, without overflow for large ``a``."""
    return _unary(a, _log_expm1, lambda x, y: -1.0 / np.expm1(-x), "log_expm1")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def abs_(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x), "abs")


def maximum(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.maximum(av, bv)
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)
    pick_a = av >= bv

    def back(g):
        return _unbroadcast(g * pick_a, av.shape), _unbroadcast(g * ~pick_a, bv.shape)

    return _node(out, (a, b), back, "maximum")


def minimum(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.minimum(av, bv)
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)
    pick_a = av <= bv

    def back(g):
        return _unbroadcast(g * pick_a, av.shape), _unbroadcast(g * ~pick_a, bv.shape)

    return _node(out, (a, b), back, "minimum")


def clip(a, lo: float, hi: float):
    av = value_of(a)
    out = np.clip(av, lo, hi)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    inside = (av >= lo) & (av <= hi)
    return _node(out, (a,), lambda g: (g * inside,), "clip")


def where(mask, a, b):
    """Select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)

    def back(g):
        return _unbroadcast(np.where(mask, g, 0.0), av.shape), _unbroadcast(np.where(mask, 0.0, g), bv.shape)

    return _node(out, (a, b), back, "where")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not _tracked(a, b):
        return out if not (isinstance(a, Tensor) or isinstance(b, Tensor)) else Tensor(out)

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return _unbroadcast(g[..., None] * bv, av.shape), _unbroadcast(
                (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0], bv.shape
            )
        if av.ndim == 1:
            return _unbroadcast((g[..., None, :] @ np.swapaxes(bv, -1, -2))[..., 0, :], av.shape), _unbroadcast(
                av[:, None] * g[..., None, :], bv.shape
            )
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(out, (a, b), back, "matmul")


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _node(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    return _node(out, (a,), lambda g: (g.reshape(av.shape),), "reshape")


def swapaxes(a, i: int, j: int):
    av = value_of(a)
    out = np.swapaxes(av, i, j)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    return _node(out, (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def expand_dims(a, axis):
    av = value_of(a)
    out = np.expand_dims(av, axis)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    return _node(out, (a,), lambda g: (g.reshape(av.shape),), "expand_dims")


def broadcast_to(a, shape):
    av = value_of(a)
    out = np.broadcast_to(av, shape)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    return _node(out, (a,), lambda g: (_unbroadcast(g, av.shape),), "broadcast_to")


def getitem(a, index):
    av = value_of(a)
    out = av[index]
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), back, "getitem")


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _tracked(*xs):
        return out if not any(isinstance(x, Tensor) for x in xs) else Tensor(out)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(xs), back, "concat")


def stack(xs: Sequence, axis: int = 0):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if not _tracked(*xs):
        return out if not any(isinstance(x, Tensor) for x in xs) else Tensor(out)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(xs), back, "stack")


# ---------------------------------------------------------------------------
# reductions used by likelihoods and attention


def logsumexp(a, axis=-1, keepdims=False):
    av = value_of(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)
    soft = np.exp(av - s)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out, (a,), back, "logsumexp")


def softmax(a, axis=-1):
    """Max-shifted softmax along ``axis``."""
    av = value_of(a)
    z = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)
    if not _tracked(a):
        return out if not isinstance(a, Tensor) else Tensor(out)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Interior nodes are released after use so large graphs do not linger.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward() expects a Tensor")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not (isinstance(p, Tensor) and p.requires_grad):
                continue
            if check_finite and not np.all(np.isfinite(pg)):
                raise NonFiniteGradientError(node.op)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)

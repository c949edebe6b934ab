"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the vector-field networks and training
objectives need: affine maps, pointwise nonlinearities, reductions, and a
stabilized log-sum-exp. It is deliberately not a general autodiff system;
every supported op lives in this file.

The module-level functions (tanh, exp, sum, logsumexp, ...) dispatch on
their argument: given a Var they extend the graph, given a plain array they
just call numpy. Objectives can therefore be written once and evaluated
with or without gradients.
"""

from __future__ import annotations

import math

import numpy as np


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, reversing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.reshape(grad, shape)


def _node(value, pairs):
    """Build a Var from (parent, vjp) pairs, keeping only Var parents."""
    kept = [(p, f) for p, f in pairs if isinstance(p, Var)]
    return Var(value, tuple(p for p, _ in kept), tuple(f for _, f in kept))


class Var:
    """Array node in a reverse-mode computation graph."""

    # Keep numpy from consuming `ndarray <op> Var`; the reflected Var
    # operator must run instead so the graph stays connected.
    __array_ufunc__ = None
    __slots__ = ("value", "grad", "_parents", "_vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable Var."""
        if self.value.ndim != 0:
            raise ValueError("backward() requires a scalar root")
        order: list[Var] = []
        seen: set[int] = set()

        def visit(v: Var) -> None:
            if id(v) in seen:
                return
            seen.add(id(v))
            for p in v._parents:
                visit(p)
            order.append(v)

        visit(self)
        self.grad = np.ones(())
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(node.grad)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        a, b = self.value, _val(other)
        return _node(a + b, [(self, lambda g: _unbroadcast(g, a.shape)),
                             (other, lambda g: _unbroadcast(g, b.shape))])

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self.value, _val(other)
        return _node(a - b, [(self, lambda g: _unbroadcast(g, a.shape)),
                             (other, lambda g: _unbroadcast(-g, b.shape))])

    def __rsub__(self, other):
        a, b = _val(other), self.value
        return _node(a - b, [(self, lambda g: _unbroadcast(-g, b.shape))])

    def __mul__(self, other):
        a, b = self.value, _val(other)
        return _node(a * b, [(self, lambda g: _unbroadcast(g * b, a.shape)),
                             (other, lambda g: _unbroadcast(g * a, b.shape))])

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self.value, _val(other)
        return _node(a / b, [(self, lambda g: _unbroadcast(g / b, a.shape)),
                             (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape))])

    def __rtruediv__(self, other):
        a, b = _val(other), self.value
        return _node(a / b, [(self, lambda g: _unbroadcast(-g * a / (b * b), b.shape))])

    def __neg__(self):
        return _node(-self.value, [(self, lambda g: -g)])

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return _node(a ** p, [(self, lambda g: g * p * a ** (p - 1))])

    def __matmul__(self, other):
        a, b = self.value, _val(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul is only supported for 2-D operands")
        return _node(a @ b, [(self, lambda g: g @ b.T),
                             (other, lambda g: a.T @ g)])

    def __rmatmul__(self, other):
        a, b = _val(other), self.value
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul is only supported for 2-D operands")
        return _node(a @ b, [(self, lambda g: a.T @ g)])

    def __getitem__(self, idx):
        a = self.value

        def vjp(g, idx=idx):
            out = np.zeros_like(a)
            np.add.at(out, idx, g)
            return out

        return _node(a[idx], [(self, vjp)])


# -- dispatching functions (Var -> graph op, ndarray -> plain numpy) --------


def exp(x):
    if isinstance(x, Var):
        y = np.exp(x.value)
        return _node(y, [(x, lambda g: g * y)])
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        a = x.value
        return _node(np.log(a), [(x, lambda g: g / a)])
    return np.log(x)


def tanh(x):
    if isinstance(x, Var):
        y = np.tanh(x.value)
        return _node(y, [(x, lambda g: g * (1.0 - y * y))])
    return np.tanh(x)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Gaussian error linear unit, tanh approximation."""
    a = _val(x)
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    th = np.tanh(inner)
    y = 0.5 * a * (1.0 + th)
    if not isinstance(x, Var):
        return y
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
    dy = 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * dinner
    return _node(y, [(x, lambda g: g * dy)])


def sum(x, axis=None):  # noqa: A001 - mirrors np.sum on purpose
    if not isinstance(x, Var):
        return np.sum(x, axis=axis)
    a = x.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _node(np.sum(a, axis=axis), [(x, vjp)])


def mean(x, axis=None):
    if not isinstance(x, Var):
        return np.mean(x, axis=axis)
    a = x.value
    count = a.size if axis is None else a.shape[axis]
    return sum(x, axis=axis) / float(count)


def logsumexp(x, axis=None, keepdims=False):
    """Stable log(sum(exp(x))) along `axis`."""
    a = _val(x)
    m = np.max(a, axis=axis, keepdims=True)
    shifted = np.exp(a - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = m + np.log(total)
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if not isinstance(x, Var):
        return out
    soft = shifted / total

    def vjp(g):
        if keepdims or axis is None:
            return np.asarray(g) * soft
        return np.expand_dims(g, axis) * soft

    return _node(out, [(x, vjp)])


def stack(xs, axis=0):
    if not any(isinstance(x, Var) for x in xs):
        return np.stack(xs, axis=axis)
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    pairs = []
    for k, x in enumerate(xs):
        pairs.append((x, lambda g, k=k: np.take(g, k, axis=axis)))
    return _node(out, pairs)


def concatenate(xs, axis=0):
    if not any(isinstance(x, Var) for x in xs):
        return np.concatenate(xs, axis=axis)
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    pairs = []
    start = 0
    for x, v in zip(xs, vals):
        width = v.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(start, start + width)
        pairs.append((x, lambda g, sl=tuple(sl): g[sl]))
        start += width
    return _node(out, pairs)

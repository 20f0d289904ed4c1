"""A small reverse-mode automatic differentiation tape over numpy arrays.

Each :class:`Node` stores its value and, for every parent, a function that
maps the output cotangent to that parent's cotangent. :func:`backward`
visits nodes in reverse topological order and accumulates cotangents.
Broadcasting in elementwise ops is undone by summing over the broadcast axes.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Node",
    "constant",
    "variable",
    "backward",
    "grad",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "maximum",
    "activation",
    "soft_threshold",
    "logsumexp",
]

_ids = itertools.count()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Node:
    __array_priority__ = 1000

    def __init__(self, value, parents=(), requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = (
            any(p.requires_grad for p, _ in self.parents) if requires_grad is None else requires_grad
        )
        if not self.requires_grad:
            self.parents = ()
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        o = _lift(other)
        return Node(
            self.value + o.value,
            [(self, lambda g, s=self.shape: _unbroadcast(g, s)),
             (o, lambda g, s=o.shape: _unbroadcast(g, s))],
        )

    __radd__ = __add__

    def __sub__(self, other):
        o = _lift(other)
        return Node(
            self.value - o.value,
            [(self, lambda g, s=self.shape: _unbroadcast(g, s)),
             (o, lambda g, s=o.shape: _unbroadcast(-g, s))],
        )

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return Node(-self.value, [(self, lambda g: -g)])

    def __mul__(self, other):
        o = _lift(other)
        a, b = self.value, o.value
        return Node(
            a * b,
            [(self, lambda g: _unbroadcast(g * b, a.shape)),
             (o, lambda g: _unbroadcast(g * a, b.shape))],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _lift(other)
        a, b = self.value, o.value
        return Node(
            a / b,
            [(self, lambda g: _unbroadcast(g / b, a.shape)),
             (o, lambda g: _unbroadcast(-g * a / (b * b), b.shape))],
        )

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Node):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return Node(a ** p, [(self, lambda g: g * p * a ** (p - 1))])

    def __matmul__(self, other):
        o = _lift(other)
        return _matmul(self, o)

    def __rmatmul__(self, other):
        return _matmul(_lift(other), self)

    @property
    def T(self):
        return Node(self.value.T, [(self, lambda g: g.T)])

    def sum(self, axis=None, keepdims=False):
        a = self.value

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape).copy()

        return Node(a.sum(axis=axis, keepdims=keepdims), [(self, back)])

    def reshape(self, *shape):
        s = self.shape
        return Node(self.value.reshape(*shape), [(self, lambda g: g.reshape(s))])

    def __getitem__(self, idx):
        s = self.shape

        def back(g):
            out = np.zeros(s)
            np.add.at(out, idx, g)
            return out

        return Node(self.value[idx], [(self, back)])


def _lift(x):
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def _matmul(a, b):
    A, B = a.value, b.value

    def back_a(g):
        if B.ndim == 1:
            return np.outer(g, B) if A.ndim == 2 else g * B
        return g @ B.T

    def back_b(g):
        return A.T @ g

    return Node(A @ B, [(a, back_a), (b, back_b)])


def constant(x):
    return Node(x, requires_grad=False)


def variable(x):
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


# elementwise functions -------------------------------------------------------

def exp(x):
    x = _lift(x)
    v = np.exp(x.value)
    return Node(v, [(x, lambda g: g * v)])


def log(x):
    x = _lift(x)
    a = x.value
    return Node(np.log(a), [(x, lambda g: g / a)])


def sqrt(x):
    x = _lift(x)
    v = np.sqrt(x.value)
    return Node(v, [(x, lambda g: g * 0.5 / v)])


def tanh(x):
    x = _lift(x)
    v = np.tanh(x.value)
    return Node(v, [(x, lambda g: g * (1.0 - v * v))])


def maximum(x, c):
    """``max(x, c)`` for a constant ``c``; the gradient at ties goes to ``c``."""
    x = _lift(x)
    a = x.value
    return Node(np.maximum(a, c), [(x, lambda g: g * (a > c))])


def activation(act, x):
    x = _lift(x)
    a = x.value
    return Node(act(a), [(x, lambda g: g * act.derivative(a))])


def soft_threshold(x, t):
    x = _lift(x)
    a = x.value
    return Node(np.sign(a) * np.maximum(np.abs(a) - t, 0.0), [(x, lambda g: g * (np.abs(a) > t))])


def logsumexp(x, axis=0):
    x = _lift(x)
    a = x.value
    mx = a.max(axis=axis, keepdims=True)
    e = np.exp(a - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    soft = e / s
    return Node(out, [(x, lambda g: np.expand_dims(g, axis) * soft)])


# sweep -----------------------------------------------------------------------

def _topo(out):
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p, _ in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(out, seed=None):
    """Cotangents of ``out`` with respect to every node on its tape, keyed by id."""
    if seed is None:
        if out.value.size != 1:
            raise ValueError("backward from a non-scalar needs an explicit seed")
        seed = np.ones_like(out.value)
    grads = {out.id: np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topo(out)):
        g = grads.pop(node.id, None) if node.parents else grads.get(node.id)
        if g is None or not node.parents:
            if g is not None:
                grads[node.id] = g
            continue
        for parent, fn in node.parents:
            if not parent.requires_grad:
                continue
            contrib = fn(g)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + contrib
            else:
                grads[parent.id] = contrib
    return grads


def grad(out, inputs):
    """Gradients of scalar ``out`` with respect to each of ``inputs``."""
    grads = backward(out)
    return [grads.get(x.id, np.zeros_like(x.value)) for x in inputs]

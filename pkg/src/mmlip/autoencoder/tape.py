"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each operation returns a :class:`Var` that remembers its parents and a
closure mapping the output cotangent to parent cotangents. ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "vjp", "name")

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = a.value / b.value
    return Var(out, (a, b),
               lambda g: (_unbroadcast(g / b.value, a.shape),
                          _unbroadcast(-g * out / b.value, b.shape)))


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Var:
    a = _lift(a)
    return Var(a.value.T, (a,), lambda g: (g.T,))


def relu(a) -> Var:
    a = _lift(a)
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def sqrt(a) -> Var:
    a = _lift(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g * 0.5 / out,))


def total(a, axis=None, keepdims=False) -> Var:
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def concat(parts, axis=1) -> Var:
    parts = [_lift(p) for p in parts]
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
               lambda g: tuple(np.split(g, cuts, axis=axis)))


def linear(x, w, b=None) -> Var:
    """``x @ w.T + b`` for a batch ``x`` of shape ``(batch, in)``."""
    out = matmul(x, transpose(w))
    return out if b is None else add(out, b)


def spectral_normalize(w) -> Var:
    """``w / sigma_max(w)``.

    The backward pass uses ``d sigma = u^T dW v`` for the top singular pair,
    which gives ``(G - <G, W'> u v^T) / sigma``. The pair comes from a full
    LAPACK SVD: the matrices are small and training calls this every step.
    """
    w = _lift(w)
    us, ss, vts = np.linalg.svd(w.value)
    sigma = float(ss[0])
    out = w.value / sigma
    uv = np.outer(us[:, 0], vts[0])
    return Var(out, (w,), lambda g: ((g - np.sum(g * out) * uv) / sigma,))


def backward(root: Var, seed=None) -> dict:
    """Cotangents of ``root`` with respect to every node, keyed by ``id``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return grads

"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` wraps a float64 array and remembers how it was produced.
Calling :func:`grad` on a scalar ``Var`` walks the graph in reverse
topological order and accumulates cotangents into every leaf that was
created with ``requires_grad=True``.

Only the operations the saliency model needs are provided.  Arithmetic
follows numpy broadcasting; cotangents are summed back to operand shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "Var",
    "const",
    "param",
    "grad",
    "conv2d",
    "max_pool2d",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "softmax_spatial",
    "bilinear_resize",
    "concat",
    "slice_channels",
    "total",
    "mean",
    "gaussian_maps",
]


class Var:
    __slots__ = ("value", "parents", "requires_grad", "name")
    # make ndarray (op) Var defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        # parents: sequence of (Var, vjp) where vjp maps this node's cotangent
        # to the parent's cotangent.
        self.parents: tuple[tuple[Var, Callable], ...] = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

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

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def const(value) -> Var:
    return Var(value)


def param(value, name=None) -> Var:
    return Var(value, requires_grad=True, name=name)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value, *parents) -> Var:
    return Var(value, [(p, fn) for p, fn in parents if p.requires_grad])


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def neg(a: Var) -> Var:
    return _node(-a.value, (a, lambda g: -g))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value
    return _node(
        out,
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    )


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _node(out, (a, lambda g: g * out))


def log(a: Var) -> Var:
    return _node(np.log(a.value), (a, lambda g: g / a.value))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return _node(out, (a, lambda g: g * 0.5 / out))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def sigmoid(a: Var) -> Var:
    out = T.sigmoid(a.value)
    return _node(out, (a, lambda g: g * out * (1.0 - out)))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return _node(out, (a, lambda g: g * (1.0 - out * out)))


def total(a: Var) -> Var:
    """Sum of all elements, as a 0-d ``Var``."""
    shape = a.shape
    return _node(np.sum(a.value), (a, lambda g: np.broadcast_to(g, shape).copy()))


def mean(a: Var) -> Var:
    return total(a) * (1.0 / a.value.size)


def conv2d(x, w, b=None, stride=1, dilation=1, padding="valid") -> Var:
    x, w = _wrap(x), _wrap(w)
    b = None if b is None else _wrap(b)
    out = T.conv2d(x.value, w.value, None if b is None else b.value, stride, dilation, padding)
    cache: dict = {}

    # The three parent vjps share one computation per incoming cotangent.
    def cot(g):
        if cache.get("g") is not g:
            cache["g"] = g
            cache["v"] = T.conv2d_vjp(g, x.value, w.value, stride, dilation, padding)
        return cache["v"]

    parents = [(x, lambda g: cot(g)[0]), (w, lambda g: cot(g)[1])]
    if b is not None:
        parents.append((b, lambda g: cot(g)[2]))
    return _node(out, *parents)


def max_pool2d(x: Var, kernel, stride, dilation=1, padding="valid") -> Var:
    out = T.max_pool2d(x.value, kernel, stride, dilation, padding)
    return _node(
        out, (x, lambda g: T.max_pool2d_vjp(g, x.value, kernel, stride, dilation, padding))
    )


def softmax_spatial(z: Var) -> Var:
    out = T.softmax_spatial(z.value)
    return _node(out, (z, lambda g: T.softmax_spatial_vjp(g, out)))


def bilinear_resize(x: Var, out_h: int, out_w: int) -> Var:
    h, w = x.shape[1:]
    return _node(
        T.bilinear_resize(x.value, out_h, out_w),
        (x, lambda g: T.bilinear_resize_vjp(g, h, w)),
    )


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = [_wrap(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=axis)

    def take(lo, hi):
        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return fn

    return _node(out, *[(p, take(bounds[i], bounds[i + 1])) for i, p in enumerate(parts)])


def slice_channels(x: Var, lo: int, hi: int) -> Var:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return full

    return _node(x.value[lo:hi], (x, fn))


def gaussian_maps(bank: Var, height: int, width: int, sigma_floor: float = 1e-3) -> Var:
    """Prior maps N x H x W from an N x 4 bank of (mu_x, mu_y, sigma_x, sigma_y).

    Cells are sampled at their centres in the unit square.  Sigmas below
    ``sigma_floor`` are clamped, and receive zero gradient while clamped.
    """
    p = bank.value
    mx, my = p[:, 0, None, None], p[:, 1, None, None]
    sx_raw, sy_raw = p[:, 2, None, None], p[:, 3, None, None]
    sx = np.maximum(sx_raw, sigma_floor)
    sy = np.maximum(sy_raw, sigma_floor)
    xs = ((np.arange(width) + 0.5) / width)[None, None, :]
    ys = ((np.arange(height) + 0.5) / height)[None, :, None]
    dx, dy = xs - mx, ys - my
    f = np.exp(-(dx**2 / (2 * sx**2) + dy**2 / (2 * sy**2))) / (2 * np.pi * sx * sy)

    def fn(g):
        gf = g * f
        d = np.empty_like(p)
        d[:, 0] = np.sum(gf * dx / sx**2, axis=(1, 2))
        d[:, 1] = np.sum(gf * dy / sy**2, axis=(1, 2))
        d[:, 2] = np.sum(gf * (dx**2 / sx**3 - 1.0 / sx), axis=(1, 2)) * (sx_raw[:, 0, 0] > sigma_floor)
        d[:, 3] = np.sum(gf * (dy**2 / sy**3 - 1.0 / sy), axis=(1, 2)) * (sy_raw[:, 0, 0] > sigma_floor)
        return d

    return _node(f, (bank, fn))


def grad(root: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    """Cotangents of scalar ``root`` with respect to each Var in ``wrt``."""
    if root.value.size != 1:
        raise ValueError("grad() needs a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    cot: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = cot.get(id(node))
        if g is None:
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            key = id(parent)
            cot[key] = cot[key] + contrib if key in cot else contrib
    return [cot.get(id(v), np.zeros_like(v.value)) for v in wrt]

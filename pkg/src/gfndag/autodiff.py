"""Sparse first-order dual numbers for tabular residual gradients.

A :class:`Dual` carries a value and a sparse gradient ``{param_id: dvalue}``.
Residuals are affine in log-probabilities and log-flows, up to log-sum-exp
terms, so addition, scaling and :func:`lse` are all that is needed.
"""
from __future__ import annotations

import math
from typing import Iterable

__all__ = ["Dual", "lse", "value_of", "grad_of"]


class Dual:
    __slots__ = ("value", "grad")

    def __init__(self, value: float, grad: dict | None = None):
        self.value = float(value)
        self.grad = grad if grad is not None else {}

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Dual) else Dual(x)

    def _combine(self, other, sign):
        o = Dual._lift(other)
        g = dict(self.grad)
        for k, v in o.grad.items():
            g[k] = g.get(k, 0.0) + sign * v
        return Dual(self.value + sign * o.value, g)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return Dual._lift(other)._combine(self, -1.0)

    def __neg__(self):
        return Dual(-self.value, {k: -v for k, v in self.grad.items()})

    def __mul__(self, c):
        if isinstance(c, Dual):
            g = {k: v * c.value for k, v in self.grad.items()}
            for k, v in c.grad.items():
                g[k] = g.get(k, 0.0) + v * self.value
            return Dual(self.value * c.value, g)
        c = float(c)
        return Dual(self.value * c, {k: v * c for k, v in self.grad.items()})

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __float__(self):
        return self.value

    def __repr__(self):
        return f"Dual({self.value!r}, {len(self.grad)} partials)"


def value_of(x) -> float:
    return x.value if isinstance(x, Dual) else float(x)


def grad_of(x) -> dict:
    return x.grad if isinstance(x, Dual) else {}


def lse(xs: Iterable) -> Dual | float:
    """log-sum-exp of duals or floats; the gradient is softmax-weighted."""
    xs = list(xs)
    vals = [value_of(x) for x in xs]
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    w = [math.exp(v - m) for v in vals]
    tot = sum(w)
    out = m + math.log(tot)
    if not any(isinstance(x, Dual) for x in xs):
        return out
    g = {}
    for x, wi in zip(xs, w):
        for k, v in grad_of(x).items():
            g[k] = g.get(k, 0.0) + v * wi / tot
    return Dual(out, g)

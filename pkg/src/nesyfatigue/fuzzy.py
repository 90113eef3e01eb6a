"""T-norm / t-conorm families with their partial derivatives.

At non-differentiable points the subgradient follows the first argument
of the underlying ``min``/``max``: ``max(a, b)`` sends the gradient to ``a``
on ties, ``min(1, a + b)`` treats ``a + b == 1`` as saturated, and
``max(0, a + b - 1)`` treats ``a + b == 1`` as clipped.

The product OR and Łukasiewicz AND are evaluated on the sorted pair as
``hi + lo * (1 - hi)`` and ``lo - (1 - hi)``. Both forms are symmetric
bit for bit, return the identity element's partner unchanged, and keep
``max <= product OR <= min(1, a + b)`` exact in floating point.
"""

from __future__ import annotations

import enum

import numpy as np


class OperatorFamily(str, enum.Enum):
    PRODUCT = "product"
    LUKASIEWICZ = "lukasiewicz"
    GOEDEL = "goedel"

    @classmethod
    def parse(cls, value) -> OperatorFamily:
        if isinstance(value, cls):
            return value
        aliases = {"godel": "goedel", "gödel": "goedel", "łukasiewicz": "lukasiewicz", "prob": "product"}
        key = str(value).lower()
        return cls(aliases.get(key, key))


def tconorm(family, a, b):
    """Fuzzy OR of ``a`` and ``b`` under ``family``."""
    family = OperatorFamily.parse(family)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if family is OperatorFamily.PRODUCT:
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return hi + lo * (1.0 - hi)
    if family is OperatorFamily.LUKASIEWICZ:
        return np.minimum(1.0, a + b)
    return np.maximum(a, b)


def tconorm_grad(family, a, b):
    """Partial derivatives ``(dS/da, dS/db)`` of :func:`tconorm`."""
    family = OperatorFamily.parse(family)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if family is OperatorFamily.PRODUCT:
        return 1.0 - b, 1.0 - a
    if family is OperatorFamily.LUKASIEWICZ:
        g = (a + b < 1.0).astype(float)
        return g, g.copy()
    take_a = a >= b
    return take_a.astype(float), (~take_a).astype(float)


def tnorm(family, a, b):
    """Fuzzy AND of ``a`` and ``b`` under ``family``."""
    family = OperatorFamily.parse(family)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if family is OperatorFamily.PRODUCT:
        return a * b
    if family is OperatorFamily.LUKASIEWICZ:
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.maximum(0.0, lo - (1.0 - hi))
    return np.minimum(a, b)


def tnorm_grad(family, a, b):
    family = OperatorFamily.parse(family)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if family is OperatorFamily.PRODUCT:
        return b.copy(), a.copy()
    if family is OperatorFamily.LUKASIEWICZ:
        g = (a + b - 1.0 > 0.0).astype(float)
        return g, g.copy()
    take_a = a <= b
    return take_a.astype(float), (~take_a).astype(float)

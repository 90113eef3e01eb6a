"""Irregularity and long-memory measures: sample entropy, R/S Hurst, outliers."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree


def _similar_pairs(templates: np.ndarray, r: float) -> int:
    """Unordered template pairs (i != j) within Chebyshev distance ``r``."""
    tree = cKDTree(templates)
    ordered = tree.count_neighbors(tree, r, p=np.inf)
    return int((ordered - len(templates)) // 2)


def sample_entropy(x, m=2, r=None):
    """Sample entropy with tolerance ``r`` (default ``0.2 * std(x)``).

    Uses the ``N - m`` templates of length ``m`` and ``m + 1`` starting at the
    same indices, Chebyshev distance and the inclusive ``<= r`` match rule.
    Returns NaN when either match count is zero.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if r is None:
        r = 0.2 * float(np.std(x))
    if n <= m + 1:
        return float("nan")
    short = sliding_window_view(x, m)[: n - m]
    long = sliding_window_view(x, m + 1)
    b = _similar_pairs(short, r)
    a = _similar_pairs(long, r)
    if a == 0 or b == 0:
        return float("nan")
    return -math.log(a / b)


def rescaled_range(block: np.ndarray) -> float:
    dev = np.cumsum(block - block.mean())
    s = block.std()
    if s == 0:
        return float("nan")
    return float((dev.max() - dev.min()) / s)


def hurst_rs(x, min_block=8):
    """Hurst exponent by rescaled-range analysis over dyadic block sizes.

    For each size ``min_block * 2**k <= n/2`` the series is cut into
    non-overlapping blocks and R/S is averaged; the exponent is the
    least-squares slope of log(R/S) against log(size).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    sizes, rs = [], []
    size = min_block
    while size <= n // 2:
        k = n // size
        blocks = x[: k * size].reshape(k, size)
        dev = np.cumsum(blocks - blocks.mean(axis=1, keepdims=True), axis=1)
        spread = dev.max(axis=1) - dev.min(axis=1)
        sd = blocks.std(axis=1)
        ok = sd > 0
        if ok.any():
            sizes.append(size)
            rs.append(np.mean(spread[ok] / sd[ok]))
        size *= 2
    if len(sizes) < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(sizes), np.log(rs), 1)
    return float(slope)


def outlier_proportion(x, k=3.0):
    """Fraction of samples farther than ``k`` scaled MADs from the median."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    med = np.median(x)
    mad = np.median(np.abs(x - med)) * 1.4826
    if mad == 0:
        return 0.0
    return float(np.mean(np.abs(x - med) > k * mad))

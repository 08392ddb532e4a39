"""Performance metrics over return series, and correlation statistics."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import stats


class EmptySeriesError(ValueError):
    pass


def _as_series(series) -> np.ndarray:
    arr = np.asarray(series, dtype=float).reshape(-1)
    if arr.size == 0:
        raise EmptySeriesError("series must be non-empty")
    return arr


def percentile(series, q: float) -> float:
    """Linear interpolation between order statistics: h = (n - 1) q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    x = np.sort(_as_series(series))
    h = (x.size - 1) * q
    lo = math.floor(h)
    if lo >= x.size - 1:
        return float(x[-1])
    return float(x[lo] + (h - lo) * (x[lo + 1] - x[lo]))


def aer(series) -> float:
    """Average of the last ceil(n/2) entries."""
    x = _as_series(series)
    half = math.ceil(x.size / 2)
    return float(np.mean(x[x.size - half:]))


def _longest_run(mask: np.ndarray) -> int:
    best = run = 0
    for flag in mask:
        run = run + 1 if flag else 0
        best = max(best, run)
    return best


def consecutive_stable(series, threshold: float) -> float:
    """Longest run with value >= threshold, as a fraction of the series length."""
    x = _as_series(series)
    return _longest_run(x >= threshold) / x.size


def sample_efficiency(series, threshold: float, k: int = 500) -> float:
    """1 - (first index starting k consecutive entries >= threshold) / n.

    If the run never happens the sample complexity is 1, so efficiency is 0.
    """
    x = _as_series(series)
    if k < 1:
        raise ValueError("k must be positive")
    run = 0
    for i, flag in enumerate(x >= threshold):
        run = run + 1 if flag else 0
        if run == k:
            return 1.0 - (i - k + 1) / x.size
    return 0.0


def stable_aer(series, beta: float) -> float:
    """beta * AER + (1 - beta) * mean of the entries <= the 10th percentile."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    x = _as_series(series)
    if beta == 1.0:
        return aer(x)
    cut = percentile(x, 0.1)
    tail = float(np.mean(x[x <= cut]))
    return beta * aer(x) + (1.0 - beta) * tail


def kendall_tau(pairs: Sequence[tuple[float, float]]) -> float:
    """Tau-a over ordered distinct pairs, no tie correction: sign(0) = 0."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise ValueError("kendall_tau needs at least two (g, s) pairs")
    n = arr.shape[0]
    g, s = arr[:, 0], arr[:, 1]
    concord = np.sign(g[:, None] - g[None, :]) * np.sign(s[:, None] - s[None, :])
    # the diagonal is zero already, so summing everything covers the ordered distinct pairs
    return float(concord.sum() / (n * (n - 1)))


def pearson_r(xs, ys) -> tuple[float, float]:
    """Pearson r with a two-sided p-value from the Student-t transform."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-d and of equal length")
    n = x.size
    if n < 3:
        raise ValueError("pearson_r needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson_r is undefined for a zero-variance series")
    r = float(dx @ dy) / math.sqrt(sxx) / math.sqrt(syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), df=n - 2))

"""Small statistics helpers shared by the experiments and acceptance checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class AffineFit:
    slope: float
    intercept: float
    r2: float
    n: int


def affine_fit(x, y) -> AffineFit:
    """Ordinary least squares y ~ a x + b with its coefficient of determination."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points for an affine fit")
    if np.ptp(y) == 0:
        return AffineFit(0.0, float(y[0]), 1.0, x.size)
    res = stats.linregress(x, y)
    return AffineFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), x.size)


def sign_test_less(a, b) -> float:
    """One-sided paired sign test p-value for H1: a < b (ties dropped)."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    diff = diff[diff != 0]
    if diff.size == 0:
        return 1.0
    return float(stats.binomtest(int((diff < 0).sum()), diff.size, 0.5, alternative="greater").pvalue)


def threshold_crossing(values, rates, level: float = 0.9, largest: bool = False):
    """First (or last) axis value whose success rate reaches ``level``.

    Returns ``None`` when no cell qualifies.
    """
    values = list(values)
    ok = [v for v, r in zip(values, rates) if r >= level]
    if not ok:
        return None
    return max(ok) if largest else min(ok)

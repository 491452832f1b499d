"""Recovery metrics: how close estimated parameter arrays are to the truth.

Pearson's p-value comes from the two-sided t test with n-2 degrees of
freedom, evaluated through the regularized incomplete beta function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


class MetricsError(ValueError):
    """Inputs violate a metric's preconditions."""


@dataclass(frozen=True)
class RecoveryScore:
    dist: float
    corr: float
    pval: float


def _vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise MetricsError(f"{what} must be a non-empty 1-d vector")
    return v


def euclidean(a, b) -> float:
    a = _vector(a, "a")
    b = _vector(b, "b")
    if a.shape != b.shape:
        raise MetricsError("vectors differ in length")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pearson(a, b) -> tuple[float, float]:
    """Sample correlation and its two-sided p-value.

    Requires length >= 3 and non-constant inputs (the coefficient is
    undefined for a constant vector).
    """
    a = _vector(a, "a")
    b = _vector(b, "b")
    if a.shape != b.shape:
        raise MetricsError("vectors differ in length")
    n = a.size
    if n < 3:
        raise MetricsError("pearson needs at least 3 points")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise MetricsError("pearson is undefined for constant input")
    da = a - a.mean()
    db = b - b.mean()
    ssa = float(da @ da)
    ssb = float(db @ db)
    if ssa == 0.0 or ssb == 0.0:
        raise MetricsError("pearson is undefined for constant input")
    r = float(da @ db) / np.sqrt(ssa * ssb)
    r = float(np.clip(r, -1.0, 1.0))
    df = n - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t_sq = r * r * df / (1.0 - r * r)
    pval = float(special.betainc(df / 2.0, 0.5, df / (df + t_sq)))
    return r, min(max(pval, 0.0), 1.0)


def kappa_ratio(estimated: float, actual: float) -> float:
    if not actual > 0.0:
        raise MetricsError("actual kappa must be positive")
    return float(estimated) / float(actual)


def score_arrays(estimated, actual) -> RecoveryScore:
    """Euclidean distance plus Pearson correlation/p-value in one record."""
    corr, pval = pearson(estimated, actual)
    return RecoveryScore(dist=euclidean(estimated, actual), corr=corr, pval=pval)

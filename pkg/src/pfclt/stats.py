"""Sample statistics for checking the normality of scaled filter errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateSample",
    "NormalityResult",
    "moments",
    "chi2_2_sf",
    "jarque_bera",
    "sample_covariance",
    "histogram",
]


class DegenerateSample(ValueError):
    """The sample has zero variance (or too few points for the moments)."""


@dataclass(frozen=True)
class NormalityResult:
    n: int
    skewness: float
    excess_kurtosis: float
    jb_stat: float
    p_value: float
    reject_at_05: bool


def moments(xs) -> tuple[float, float, float, float]:
    """Mean, variance, skewness and (non-excess) kurtosis with divisor ``n``.

    >>> moments([1, 2, 3, 4, 5])
    (3.0, 2.0, 0.0, 1.7)
    """
    x = np.asarray(xs, dtype=float).reshape(-1)
    if x.size < 4:
        raise DegenerateSample(f"need at least 4 observations, got {x.size}")
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d**2))
    if m2 == 0.0:
        raise DegenerateSample("sample variance is zero")
    m3 = float(np.mean(d**3))
    m4 = float(np.mean(d**4))
    return mean, m2, m3 / m2**1.5, m4 / m2**2


def chi2_2_sf(x: float) -> float:
    """Survival function of the chi-square law with 2 degrees of freedom."""
    return float(np.exp(-0.5 * x))


def jarque_bera(xs) -> NormalityResult:
    """Classical Jarque-Bera test, ``JB = n/6 (S^2 + (K - 3)^2 / 4)``."""
    x = np.asarray(xs, dtype=float).reshape(-1)
    _, _, skew, kurt = moments(x)
    n = x.size
    jb = n / 6.0 * (skew**2 + (kurt - 3.0) ** 2 / 4.0)
    p = chi2_2_sf(jb)
    return NormalityResult(
        n=n,
        skewness=skew,
        excess_kurtosis=kurt - 3.0,
        jb_stat=jb,
        p_value=p,
        reject_at_05=p < 0.05,
    )


def sample_covariance(errors) -> np.ndarray:
    """Unbiased (``R - 1`` divisor) covariance of the rows of an ``R x n`` matrix."""
    e = np.asarray(errors, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] < 2:
        raise ValueError(f"need at least 2 rows, got {e.shape[0]}")
    return np.atleast_2d(np.cov(e, rowvar=False, ddof=1))


def histogram(xs, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over ``[min, max]``; the last bin is closed on the right."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    counts, edges = np.histogram(np.asarray(xs, dtype=float).reshape(-1), bins=bins)
    return edges, counts

"""Parameter-recovery statistics and percentile bootstrap intervals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested for a constant vector."""


@dataclass(frozen=True)
class RecoveryStats:
    rho_theta: float
    rho_delta: float
    rho_a: float
    rse_theta: float
    rse_delta: float
    rse_a: float
    flip_rate: float
    pseudo_r2_fit: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    level: float
    n_resamples: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("lo must not exceed hi")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    return x, y


def pearson(x, y) -> float:
    """Sample Pearson correlation.

    Raises
    ------
    UndefinedCorrelationError
        If either vector has zero variance.
    """
    x, y = _pair(x, y)
    if x.size < 2:
        raise ValueError("pearson needs at least two observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if not (sxx > 0 and syy > 0):
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = np.dot(xc, yc) / math.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def rse(true_vals, est_vals) -> float:
    """Relative squared error ``sum (true - est)^2 / sum (true - mean(true))^2``.

    Equal to one minus the pseudo-R2 with the true values in the observed
    role; 0 is perfect recovery, 1 is no better than predicting the mean.
    """
    t, e = _pair(true_vals, est_vals)
    v = np.sum((t - t.mean()) ** 2)
    if not v > 0:
        raise ValueError("RSE is undefined for a constant true vector")
    return float(np.sum((t - e) ** 2) / v)


def sign_flip_rate(true_a, est_a) -> float:
    """Fraction of items whose estimated discrimination has the wrong sign.

    Indices where either value is exactly zero are left out entirely.
    """
    t, e = _pair(true_a, est_a)
    keep = (t != 0) & (e != 0)
    if not keep.any():
        return 0.0
    return float(np.mean(np.sign(t[keep]) != np.sign(e[keep])))


def bootstrap_ci(values, level: float = 0.95, n_resamples: int = 10000,
                 seed: int = 0) -> ConfidenceInterval:
    """Percentile bootstrap interval for the mean of ``values``."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("bootstrap_ci needs at least two values")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if n_resamples < 1:
        raise ValueError("n_resamples must be positive")
    rng = np.random.default_rng(seed)
    # resample in blocks so the index array stays near a million entries
    block = max(1, 1_000_000 // x.size)
    means = np.empty(n_resamples)
    for start in range(0, n_resamples, block):
        stop = min(start + block, n_resamples)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        means[start:stop] = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    # the means of a constant vector can differ from it in the last ulp
    lo, hi = max(float(lo), x.min()), min(float(hi), x.max())
    return ConfidenceInterval(float(lo), float(hi), level, n_resamples)


def recovery_stats(theta_true, theta_est, delta_true, delta_est, a_true, a_est,
                   pseudo_r2_fit: float) -> RecoveryStats:
    """All recovery statistics for one fit; undefined correlations become NaN."""

    def rho(x, y):
        try:
            return pearson(x, y)
        except UndefinedCorrelationError:
            return float("nan")

    return RecoveryStats(
        rho_theta=rho(theta_true, theta_est),
        rho_delta=rho(delta_true, delta_est),
        rho_a=rho(a_true, a_est),
        rse_theta=rse(theta_true, theta_est),
        rse_delta=rse(delta_true, delta_est),
        rse_a=rse(a_true, a_est),
        flip_rate=sign_flip_rate(a_true, a_est),
        pseudo_r2_fit=pseudo_r2_fit,
    )

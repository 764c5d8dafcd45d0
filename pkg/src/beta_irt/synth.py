"""Seeded ground truth and simulated response matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import beta_shape_params, clamp_responses


@dataclass(frozen=True)
class GenConfig:
    M: int
    N: int
    n_draws: int = 100
    sigma0_sq: float = 1.0
    seed: int = 0
    ability_dist: tuple[float, float] = (1.0, 1.0)
    difficulty_dist: tuple[float, float] = (1.0, 1.0)
    discrimination_mean: float = 1.0

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be positive")
        if self.n_draws < 1:
            raise ValueError("n_draws must be at least 1")
        if not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be positive")
        for name in ("ability_dist", "difficulty_dist"):
            shapes = tuple(float(s) for s in getattr(self, name))
            if len(shapes) != 2 or min(shapes) <= 0:
                raise ValueError(f"{name} must be a pair of positive Beta shapes")
            object.__setattr__(self, name, shapes)


@dataclass(frozen=True)
class TrueParams:
    theta: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    # human-readable record of the generating distributions
    distributions: dict | None = None


def streams(seed: int, *key: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Two independent generators (parameters, responses) for one replication.

    ``key`` distinguishes e.g. datasets that share a replication seed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    params_ss, responses_ss = ss.spawn(2)
    return np.random.default_rng(params_ss), np.random.default_rng(responses_ss)


def sample_true_params(cfg: GenConfig, rng: np.random.Generator | None = None) -> TrueParams:
    """Draw abilities, difficulties and discriminations i.i.d. from their priors."""
    if rng is None:
        rng = streams(cfg.seed)[0]
    theta = rng.beta(*cfg.ability_dist, size=cfg.M)
    delta = rng.beta(*cfg.difficulty_dist, size=cfg.N)
    a = rng.normal(cfg.discrimination_mean, np.sqrt(cfg.sigma0_sq), size=cfg.N)
    dists = {
        "theta": f"Beta{cfg.ability_dist}",
        "delta": f"Beta{cfg.difficulty_dist}",
        "a": f"Normal({cfg.discrimination_mean}, {cfg.sigma0_sq})",
    }
    return TrueParams(theta, delta, a, dists)


def sample_beta(alpha, beta, rng: np.random.Generator, size=None):
    """Beta draws as ``x / (x + y)`` with ``x ~ Gamma(alpha)``, ``y ~ Gamma(beta)``.

    Valid for every positive shape, including shapes below one. If both
    gamma draws underflow to zero (shapes far below one), the draw is placed
    at 1 with probability ``alpha / (alpha + beta)`` and at 0 otherwise, which
    is the limiting distribution for vanishing shapes.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(~(alpha > 0)) or np.any(~(beta > 0)):
        raise ValueError("Beta shapes must be positive")
    x = rng.standard_gamma(alpha, size=size)
    y = rng.standard_gamma(beta, size=size)
    s = x + y
    with np.errstate(invalid="ignore"):
        out = x / s
    both_zero = s == 0
    if np.any(both_zero):
        p_one = np.broadcast_to(alpha / (alpha + beta), np.shape(out))
        u = rng.random(np.shape(out))
        out = np.where(both_zero, (u < p_one).astype(float), out)
    return float(out) if np.ndim(out) == 0 else out


def generate_responses(tp: TrueParams, cfg: GenConfig,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Each cell is the mean of ``cfg.n_draws`` Beta(alpha_ij, beta_ij) draws.

    Cells are drawn one row at a time in row-major order, so the output
    depends only on the generator state. The result is clamped into the open
    unit interval.
    """
    if rng is None:
        rng = streams(cfg.seed)[1]
    M, N = len(tp.theta), len(tp.delta)
    alpha, beta = beta_shape_params(tp.theta[:, None], tp.delta[None, :], tp.a[None, :])
    out = np.empty((M, N))
    for i in range(M):
        draws = sample_beta(alpha[i][:, None], beta[i][:, None], rng, size=(N, cfg.n_draws))
        out[i] = draws.mean(axis=1)
    return clamp_responses(out)

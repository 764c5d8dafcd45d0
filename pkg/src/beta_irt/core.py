"""Link functions, the Beta-IRT item characteristic curve and Beta shapes.

Everything here is a pure function of its inputs and works elementwise on
scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Responses are clamped into [EPS_RESP, 1 - EPS_RESP] on ingestion.
EPS_RESP = 1e-6
# Largest |tau| accepted by artanh after clamping.
TAU_MAX = 1.0 - 1e-6
# Exponents are clipped to +/- EXP_CAP before exponentiation.
EXP_CAP = 500.0


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an inverse link."""


def _scalar_or_array(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def sigmoid(x):
    """Overflow-safe logistic function ``1 / (1 + exp(-x))``."""
    x = np.asarray(x, dtype=float)
    # exp is only ever taken of a non-positive number
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _scalar_or_array(out)


def logit(p):
    """Inverse of :func:`sigmoid`, ``ln(p / (1 - p))``.

    Raises
    ------
    DomainError
        If any element of ``p`` is outside the open interval (0, 1).
    """
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise DomainError("logit is only defined on (0, 1)")
    return _scalar_or_array(np.log(p) - np.log1p(-p))


def softplus(x):
    """``ln(1 + e^x)``, evaluated without overflow for large ``x``."""
    x = np.asarray(x, dtype=float)
    return _scalar_or_array(np.logaddexp(0.0, x))


def softplus_inv(y):
    """Inverse softplus ``ln(e^y - 1)``; ``y`` must be strictly positive."""
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0.0)):
        raise DomainError("softplus_inv is only defined for y > 0")
    # ln(e^y - 1) = y + ln(1 - e^-y)
    return _scalar_or_array(y + np.log(-np.expm1(-y)))


def tanh_link(x):
    return _scalar_or_array(np.tanh(np.asarray(x, dtype=float)))


def artanh(y):
    """Inverse of :func:`tanh_link`; ``|y|`` must be strictly below 1."""
    y = np.asarray(y, dtype=float)
    if np.any(~(np.abs(y) < 1.0)):
        raise DomainError("artanh is only defined on (-1, 1)")
    return _scalar_or_array(np.arctanh(y))


def clamp_responses(values, eps: float = EPS_RESP) -> np.ndarray:
    """Validate a dense response grid and clamp it into ``[eps, 1 - eps]``.

    Parameters
    ----------
    values : array_like
        M x N grid of observed proportions.
    eps : float
        Clamping margin.

    Returns
    -------
    numpy.ndarray
        A new float64 array of shape (M, N).
    """
    p = np.array(values, dtype=float)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ValueError(f"response matrix must be 2-D and non-empty, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("response matrix contains missing or non-finite cells")
    return np.clip(p, eps, 1.0 - eps)


@dataclass(frozen=True)
class NaturalParams:
    """Model-space parameters.

    For the four-parameter model ``omega`` and ``tau`` are set and the
    discrimination is their product. The single-discrimination baseline
    leaves them as ``None`` and stores ``raw_discrimination`` instead.
    """

    theta: np.ndarray
    delta: np.ndarray
    omega: np.ndarray | None = None
    tau: np.ndarray | None = None
    raw_discrimination: np.ndarray | None = None

    @property
    def a(self) -> np.ndarray:
        if self.omega is None:
            return self.raw_discrimination
        return self.omega * self.tau

    @property
    def M(self) -> int:
        return len(self.theta)

    @property
    def N(self) -> int:
        return len(self.delta)


@dataclass(frozen=True)
class UnconstrainedParams:
    """Raw optimizer state on the real line.

    ``o`` and ``b`` carry the discrimination magnitude and sign of the
    four-parameter model. When ``a`` is given instead, the discrimination is
    that raw real (single-discrimination baseline) and ``o``/``b`` are None.
    """

    t: np.ndarray
    d: np.ndarray
    o: np.ndarray | None = None
    b: np.ndarray | None = None
    a: np.ndarray | None = None

    @property
    def single_discrimination(self) -> bool:
        return self.a is not None

    def discrimination(self) -> np.ndarray:
        if self.a is not None:
            return self.a
        return softplus(self.o) * np.tanh(self.b)

    def blocks(self) -> dict[str, np.ndarray]:
        """Named parameter vectors in a fixed order."""
        names = ("t", "d", "a") if self.single_discrimination else ("t", "d", "o", "b")
        return {name: getattr(self, name) for name in names}

    def to_vector(self) -> np.ndarray:
        return np.concatenate(list(self.blocks().values()))

    def with_vector(self, vec) -> "UnconstrainedParams":
        vec = np.asarray(vec, dtype=float)
        out, start = {}, 0
        for name, block in self.blocks().items():
            out[name] = vec[start:start + len(block)].copy()
            start += len(block)
        if start != len(vec):
            raise ValueError(f"expected a vector of length {start}, got {len(vec)}")
        return UnconstrainedParams(**out)

    def copy(self) -> "UnconstrainedParams":
        return UnconstrainedParams(**{k: v.copy() for k, v in self.blocks().items()})


def to_natural(u: UnconstrainedParams) -> NaturalParams:
    theta = np.asarray(sigmoid(u.t), dtype=float)
    delta = np.asarray(sigmoid(u.d), dtype=float)
    if u.single_discrimination:
        return NaturalParams(theta, delta, raw_discrimination=np.array(u.a, dtype=float))
    return NaturalParams(
        theta,
        delta,
        omega=np.asarray(softplus(u.o), dtype=float),
        tau=np.asarray(tanh_link(u.b), dtype=float),
    )


def from_natural(n: NaturalParams) -> UnconstrainedParams:
    """Map model-space parameters back through the inverse links.

    Boundary values (theta or delta at 0/1, omega at 0, |tau| at 1) raise
    :class:`DomainError`; clamp before calling.
    """
    t = np.asarray(logit(n.theta), dtype=float)
    d = np.asarray(logit(n.delta), dtype=float)
    if n.omega is None:
        return UnconstrainedParams(t, d, a=np.array(n.raw_discrimination, dtype=float))
    return UnconstrainedParams(
        t,
        d,
        o=np.asarray(softplus_inv(n.omega), dtype=float),
        b=np.asarray(artanh(n.tau), dtype=float),
    )


def icc_expected(theta, delta, a):
    """Expected response of a respondent with ability ``theta`` on an item.

    Evaluated as ``sigmoid(a * (logit(theta) - logit(delta)))``, which is the
    closed-form Beta mean ``alpha / (alpha + beta)`` rewritten so the power
    terms cannot overflow.
    """
    z = np.asarray(a, dtype=float) * (np.asarray(logit(theta)) - np.asarray(logit(delta)))
    return sigmoid(np.clip(z, -EXP_CAP, EXP_CAP))


def beta_shape_params(theta, delta, a):
    """Shape parameters ``(alpha, beta)`` of the response distribution.

    ``alpha = (theta / delta)^a`` and ``beta = ((1 - theta) / (1 - delta))^a``,
    computed in log space with the exponent clipped to ``+/- EXP_CAP``.
    """
    theta = np.asarray(theta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(~((theta > 0) & (theta < 1))) or np.any(~((delta > 0) & (delta < 1))):
        raise DomainError("theta and delta must lie in (0, 1)")
    log_alpha = a * (np.log(theta) - np.log(delta))
    log_beta = a * (np.log1p(-theta) - np.log1p(-delta))
    alpha = np.exp(np.clip(log_alpha, -EXP_CAP, EXP_CAP))
    beta = np.exp(np.clip(log_beta, -EXP_CAP, EXP_CAP))
    return _scalar_or_array(alpha), _scalar_or_array(beta)

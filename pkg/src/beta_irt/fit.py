"""Loss, analytic gradients, initialisation and the two-phase descent loop."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    EXP_CAP,
    TAU_MAX,
    NaturalParams,
    UnconstrainedParams,
    artanh,
    clamp_responses,
    logit,
    sigmoid,
    softplus,
    softplus_inv,
    to_natural,
)

logger = logging.getLogger(__name__)

# |tau| floor at initialisation, and the value used when a correlation is undefined.
TAU_MIN = 0.05
# Fixed sign factor used to start the four-parameter model without priors.
TAU_NO_PRIORS = 0.5


class ModelKind(str, enum.Enum):
    BETA4 = "beta4"
    BETA4_NO_PRIORS = "beta4-nopriors"
    BETA3 = "beta3"


class LossKind(str, enum.Enum):
    ONE_SIDED = "one-sided"
    FULL_CE = "full-ce"


class FitDivergedError(RuntimeError):
    """The loss or a gradient became non-finite during fitting."""

    def __init__(self, message: str, epoch: int | None = None, last_state=None, index=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_state = last_state
        self.index = index


class UndefinedScoreError(ValueError):
    """Pseudo-R2 is undefined for a constant observed matrix."""


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of a fit.

    ``freeze_tau=None`` resolves to True for ``BETA4`` and False otherwise.
    ``reduction`` controls the scale of the objective that the descent step
    is taken on: ``"mean"`` divides the summed loss by the number of cells.
    """

    learning_rate: float = 1.0
    n_epochs: int = 10000
    n_inits: int = 1000
    tol: float = 1e-8
    seed: int = 0
    model_kind: ModelKind = ModelKind.BETA4
    freeze_tau: bool | None = None
    loss_kind: LossKind = LossKind.FULL_CE
    reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.freeze_tau is None:
            object.__setattr__(self, "freeze_tau", self.model_kind is ModelKind.BETA4)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be a positive integer")
        if not 0 <= self.n_inits <= self.n_epochs:
            raise ValueError("n_inits must satisfy 0 <= n_inits <= n_epochs")
        if not self.tol >= 0:
            raise ValueError("tol must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


@dataclass(frozen=True)
class GradientSet:
    """Gradients of the loss with respect to each raw parameter block.

    ``dH_do``/``dH_db`` are set for the four-parameter model, ``dH_da`` for
    the single-discrimination baseline.
    """

    dH_dt: np.ndarray
    dH_dd: np.ndarray
    dH_do: np.ndarray | None = None
    dH_db: np.ndarray | None = None
    dH_da: np.ndarray | None = None

    def to_vector(self) -> np.ndarray:
        parts = [self.dH_dt, self.dH_dd]
        if self.dH_da is not None:
            parts.append(self.dH_da)
        else:
            parts += [self.dH_do, self.dH_db]
        return np.concatenate(parts)


@dataclass
class FitResult:
    params: NaturalParams
    raw: UnconstrainedParams
    loss_trace: list[tuple[int, float]]
    converged_at: int | None
    pseudo_r2: float  # NaN when the observed matrix is constant
    predicted: np.ndarray
    config: FitConfig = field(repr=False, default=None)

    @property
    def losses(self) -> np.ndarray:
        return np.array([loss for _, loss in self.loss_trace])


def _logits(u: UnconstrainedParams) -> np.ndarray:
    # logit(sigmoid(t)) == t, so the ICC argument is a_j * (t_i - d_j)
    with np.errstate(over="ignore"):
        z = u.discrimination()[None, :] * (u.t[:, None] - u.d[None, :])
    return np.clip(z, -EXP_CAP, EXP_CAP)


def predict(u: UnconstrainedParams) -> np.ndarray:
    """Expected response for every (respondent, item) cell."""
    return sigmoid(_logits(u))


def _check_pair(p, p_hat):
    p = np.asarray(p, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    if p.shape != p_hat.shape:
        raise ValueError(f"shape mismatch: observed {p.shape} vs predicted {p_hat.shape}")
    return p, p_hat


def loss(p, p_hat, kind: LossKind | str = LossKind.FULL_CE) -> float:
    """Cross-entropy between observed and predicted responses (summed).

    ``ONE_SIDED`` is ``-sum p ln p_hat``; ``FULL_CE`` adds the complement term
    ``-sum (1 - p) ln(1 - p_hat)`` so that the minimum sits at ``p_hat = p``.
    """
    p, p_hat = _check_pair(p, p_hat)
    kind = LossKind(kind)
    h = -np.sum(p * np.log(p_hat))
    if kind is LossKind.FULL_CE:
        h -= np.sum((1.0 - p) * np.log1p(-p_hat))
    return float(h)


def _cell_losses(p: np.ndarray, z: np.ndarray, kind: LossKind) -> np.ndarray:
    # -ln(1 - p_hat) = softplus(z) and -ln p_hat = softplus(z) - z
    sp = np.logaddexp(0.0, z)
    if kind is LossKind.FULL_CE:
        return sp - p * z
    return p * (sp - z)


def _loss_from_logits(p: np.ndarray, z: np.ndarray, kind: LossKind) -> float:
    return float(np.sum(_cell_losses(p, z, kind)))


def _residual(p: np.ndarray, z: np.ndarray, kind: LossKind) -> np.ndarray:
    """Per-cell derivative of the loss with respect to the logit ``z``."""
    if kind is LossKind.FULL_CE:
        return sigmoid(z) - p
    return -p * sigmoid(-z)


def _raise_nonfinite(name: str, arr: np.ndarray):
    bad = np.argwhere(~np.isfinite(arr))
    if len(bad):
        idx = tuple(int(i) for i in bad[0])
        raise FitDivergedError(f"non-finite value in {name} at index {idx}", index=(name, idx))


def _gradients(u: UnconstrainedParams, r: np.ndarray) -> GradientSet:
    a = u.discrimination()
    dH_dt = r @ a
    dH_dd = -a * r.sum(axis=0)
    dH_da = np.einsum("ij,ij->j", r, u.t[:, None] - u.d[None, :])
    for name, g in (("dH_dt", dH_dt), ("dH_dd", dH_dd), ("dH_da", dH_da)):
        _raise_nonfinite(name, g)
    if u.single_discrimination:
        return GradientSet(dH_dt, dH_dd, dH_da=dH_da)
    tau = np.tanh(u.b)
    dH_do = dH_da * tau * sigmoid(u.o)
    dH_db = dH_da * softplus(u.o) * (1.0 - tau**2)
    return GradientSet(dH_dt, dH_dd, dH_do=dH_do, dH_db=dH_db)


def analytic_gradients(p, u: UnconstrainedParams, loss_kind=LossKind.FULL_CE) -> GradientSet:
    """Exact gradient of the summed loss with respect to the raw parameters.

    Every cell contributes through ``z_ij = a_j (t_i - d_j)``, where
    ``t_i - d_j = -ln Phi(theta_i, delta_j)``. The link factors
    ``Theta(theta) * dtheta/dt`` and ``Delta(delta) * ddelta/dd`` are both
    identically 1, and ``Phi^a * p_hat = 1 - p_hat``, so the per-cell term is
    the residual ``r = dH/dz`` times the derivative of ``z``:

    - ``dH/dt_i = sum_j r_ij a_j``
    - ``dH/dd_j = -a_j sum_i r_ij``
    - ``dH/da_j = sum_i r_ij (t_i - d_j)``, then ``* tau_j sigmoid(o_j)`` for
      ``o_j`` and ``* omega_j (1 - tau_j^2)`` for ``b_j``.

    ``r_ij`` is ``p_hat - p`` for the full cross-entropy and
    ``-p (1 - p_hat)`` for the one-sided loss.

    Raises
    ------
    FitDivergedError
        If any gradient entry is non-finite; ``index`` names the block and
        position.
    """
    p = np.asarray(p, dtype=float)
    loss_kind = LossKind(loss_kind)
    return _gradients(u, _residual(p, _logits(u), loss_kind))


def finite_diff_gradients(p, u: UnconstrainedParams, h: float = 1e-5,
                          loss_kind=LossKind.FULL_CE) -> GradientSet:
    """Central-difference gradient of the loss, one raw coordinate at a time.

    The loss is evaluated from the logits rather than from rounded
    predictions, and the two perturbed losses are differenced cell by cell
    before summing, so neither saturated cells nor the size of the total
    swamp the difference quotient.
    """
    p = np.asarray(p, dtype=float)
    loss_kind = LossKind(loss_kind)
    if not h > 0:
        raise ValueError("h must be positive")
    x = u.to_vector()
    g = np.empty_like(x)
    for k in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        hp = _cell_losses(p, _logits(u.with_vector(xp)), loss_kind)
        hm = _cell_losses(p, _logits(u.with_vector(xm)), loss_kind)
        g[k] = np.sum(hp - hm) / (2.0 * h)
    M, N = len(u.t), len(u.d)
    if u.single_discrimination:
        return GradientSet(g[:M], g[M:M + N], dH_da=g[M + N:])
    return GradientSet(g[:M], g[M:M + N], dH_do=g[M + N:M + 2 * N], dH_db=g[M + 2 * N:])


def _pearson_columns(x: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Correlation of ``x`` with every column; NaN where undefined."""
    xc = x - x.mean()
    cc = cols - cols.mean(axis=0)
    num = xc @ cc
    den = np.sqrt(np.sum(xc**2) * np.sum(cc**2, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = num / den
    rho[~(den > 0)] = np.nan
    return rho


def clamp_tau(tau) -> np.ndarray:
    """Replace undefined values by ``+TAU_MIN`` and clamp ``|tau|`` into
    ``[TAU_MIN, TAU_MAX]`` keeping the sign."""
    tau = np.array(tau, dtype=float)
    undefined = ~np.isfinite(tau)
    sign = np.where(tau < 0, -1.0, 1.0)
    mag = np.clip(np.abs(np.where(undefined, TAU_MIN, tau)), TAU_MIN, TAU_MAX)
    return np.where(undefined, TAU_MIN, sign * mag)


def init_with_priors(p, seed=None) -> UnconstrainedParams:
    """Data-driven starting point.

    Abilities start at the respondent's mean response, difficulties at one
    minus the item's mean response, magnitudes at 1 and each sign factor at
    the correlation between starting abilities and the item's responses.
    ``seed`` is accepted for interface symmetry; the result is deterministic.
    """
    p = np.asarray(p, dtype=float)
    theta0 = p.mean(axis=1)
    t = np.asarray(logit(theta0), dtype=float).reshape(-1)
    d = np.asarray(logit(1.0 - p.mean(axis=0)), dtype=float).reshape(-1)
    N = p.shape[1]
    o = np.full(N, softplus_inv(1.0))
    b = np.asarray(artanh(clamp_tau(_pearson_columns(theta0, p))), dtype=float)
    return UnconstrainedParams(t, d, o=o, b=b)


def init_without_priors(shape, seed, single_discrimination: bool = False) -> UnconstrainedParams:
    """Random start: ``t``, ``d`` i.i.d. standard normal from a seeded generator.

    Discriminations start at ``a = 1`` for the baseline and at ``omega = 1``,
    ``tau = TAU_NO_PRIORS`` for the four-parameter model.
    """
    M, N = shape
    if M < 1 or N < 1:
        raise ValueError("shape must be positive")
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(M)
    d = rng.standard_normal(N)
    if single_discrimination:
        return UnconstrainedParams(t, d, a=np.ones(N))
    return UnconstrainedParams(
        t, d, o=np.full(N, softplus_inv(1.0)), b=np.full(N, artanh(TAU_NO_PRIORS))
    )


def initial_params(p, config: FitConfig) -> UnconstrainedParams:
    if config.model_kind is ModelKind.BETA4:
        return init_with_priors(p, config.seed)
    return init_without_priors(
        p.shape, config.seed, single_discrimination=config.model_kind is ModelKind.BETA3
    )


def pseudo_r2(p, p_hat) -> float:
    """Goodness of fit ``1 - u/v`` with ``u`` the residual sum of squares and
    ``v`` the sum of squares about the grand mean of ``p``."""
    p, p_hat = _check_pair(p, p_hat)
    v = np.sum((p - p.mean()) ** 2)
    if not v > 0:
        raise UndefinedScoreError("pseudo-R2 is undefined for a constant response matrix")
    u = np.sum((p - p_hat) ** 2)
    return float(1.0 - u / v)


def _apply_step(u: UnconstrainedParams, g: GradientSet, step: float,
                discriminations: bool, freeze_tau: bool) -> None:
    u.t[:] -= step * g.dH_dt
    u.d[:] -= step * g.dH_dd
    if not discriminations:
        return
    if u.single_discrimination:
        u.a[:] -= step * g.dH_da
    else:
        u.o[:] -= step * g.dH_do
        if not freeze_tau:
            u.b[:] -= step * g.dH_db


def fit(p, config: FitConfig | None = None, init: UnconstrainedParams | None = None) -> FitResult:
    """Plain full-batch gradient descent in two phases.

    During the first ``config.n_inits`` epochs only abilities and
    difficulties move. Afterwards the discrimination parameters are updated
    too, except the sign factor ``b`` when ``freeze_tau`` is set. Stops early
    once the absolute loss change between consecutive epochs drops below
    ``tol`` (checked only after the frozen phase).

    The recorded loss and the descent step use the objective scaled by
    ``config.reduction``: with ``"mean"`` (default) that is the summed loss
    divided by ``M * N``.

    Raises
    ------
    FitDivergedError
        If a gradient or parameter becomes non-finite; carries the epoch and
        the last finite state.
    """
    config = config or FitConfig()
    p = clamp_responses(p)
    u = (init if init is not None else initial_params(p, config)).copy()
    if u.single_discrimination != (config.model_kind is ModelKind.BETA3):
        raise ValueError("initial parameters do not match the configured model kind")

    scale = 1.0 / p.size if config.reduction == "mean" else 1.0
    step = config.learning_rate * scale
    trace: list[tuple[int, float]] = []
    converged_at = None
    prev = None

    for epoch in range(config.n_epochs):
        z = _logits(u)
        h = scale * _loss_from_logits(p, z, config.loss_kind)
        trace.append((epoch, h))
        if prev is not None and epoch > config.n_inits and abs(h - prev) < config.tol:
            converged_at = epoch
            logger.debug("converged at epoch %d", epoch)
            break
        prev = h

        try:
            g = _gradients(u, _residual(p, z, config.loss_kind))
        except FitDivergedError as exc:
            exc.epoch, exc.last_state = epoch, u.copy()
            raise
        last_good = u.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            _apply_step(u, g, step, epoch >= config.n_inits, config.freeze_tau)
        # clipped logits keep the loss finite, so divergence shows up here
        if not all(np.all(np.isfinite(v)) for v in u.blocks().values()):
            raise FitDivergedError(
                f"parameters became non-finite at epoch {epoch}",
                epoch=epoch, last_state=last_good,
            )

    p_hat = predict(u)
    try:
        score = pseudo_r2(p, p_hat)
    except UndefinedScoreError:
        logger.warning("constant response matrix; pseudo-R2 reported as NaN")
        score = float("nan")
    return FitResult(
        params=to_natural(u),
        raw=u,
        loss_trace=trace,
        converged_at=converged_at,
        pseudo_r2=score,
        predicted=p_hat,
        config=config,
    )

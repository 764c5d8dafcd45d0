"""Monte Carlo parameter-recovery experiments.

Replication ``r`` of every dataset uses seed ``base_seed + r``; the dataset
index keys an independent pair of generator streams under that seed, one
for the true parameters and one for the responses. Fits that start from a
random point use the same replication seed.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .files import (
    ConfigFile,
    InputError,
    fmt,
    parse_bool,
    parse_pair,
    parse_shapes,
    write_json,
)
from .fit import FitConfig, FitDivergedError, LossKind, ModelKind, fit
from .metrics import bootstrap_ci, recovery_stats, sign_flip_rate
from .synth import GenConfig, TrueParams, generate_responses, sample_true_params, streams

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS = ("rho_theta", "rho_delta", "rho_a", "rse_theta", "rse_delta", "rse_a", "flip_rate")
MODEL_ORDER = (ModelKind.BETA3, ModelKind.BETA4, ModelKind.BETA4_NO_PRIORS)


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo design.

    ``datasets`` holds ``(N items, M respondents)`` pairs. ``models`` maps each
    model variant to its fit settings; the ``seed`` field of those settings
    is replaced per replication.
    """

    datasets: tuple[tuple[int, int], ...]
    n_replications: int
    models: dict[ModelKind, FitConfig]
    gen: GenConfig = field(default_factory=lambda: GenConfig(M=1, N=1))
    base_seed: int = 0
    output_dir: str | None = None
    level: float = 0.95
    n_resamples: int = 10000

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple((int(n), int(m)) for n, m in self.datasets))
        if not self.datasets or any(n < 1 or m < 1 for n, m in self.datasets):
            raise ValueError("dataset shapes must be positive")
        if self.n_replications < 1:
            raise ValueError("n_replications must be positive")
        if not self.models:
            raise ValueError("at least one model variant is required")

    def replication_seed(self, replication: int) -> int:
        return self.base_seed + replication

    def to_dict(self) -> dict:
        return {
            "datasets": [{"n_items": n, "n_respondents": m} for n, m in self.datasets],
            "n_replications": self.n_replications,
            "base_seed": self.base_seed,
            "seed_rule": "replication seed = base_seed + replication index",
            "generate": {
                "n_draws": self.gen.n_draws,
                "sigma0_sq": self.gen.sigma0_sq,
                "ability_dist": list(self.gen.ability_dist),
                "difficulty_dist": list(self.gen.difficulty_dist),
                "discrimination_mean": self.gen.discrimination_mean,
            },
            "models": {
                kind.value: _fit_config_dict(cfg) for kind, cfg in _ordered(self.models)
            },
            "bootstrap": {
                "method": "percentile",
                "statistic": "mean",
                "resampling_unit": "replication",
                "level": self.level,
                "n_resamples": self.n_resamples,
            },
        }


def _fit_config_dict(cfg: FitConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("seed")
    d["model_kind"] = cfg.model_kind.value
    d["loss_kind"] = cfg.loss_kind.value
    return d


def _ordered(models: dict):
    return [(k, models[k]) for k in MODEL_ORDER if k in models]


def dataset_label(n_items: int, n_respondents: int) -> str:
    return f"N={n_items},M={n_respondents}"


def _run_replication(cfg: ExperimentConfig, ds_index: int, replication: int) -> list[dict]:
    n_items, n_resp = cfg.datasets[ds_index]
    seed = cfg.replication_seed(replication)
    gen = dataclasses.replace(cfg.gen, M=n_resp, N=n_items, seed=seed)
    params_rng, responses_rng = streams(seed, ds_index)
    truth = sample_true_params(gen, params_rng)
    p = generate_responses(truth, gen, responses_rng)

    rows = []
    for kind, fit_cfg in _ordered(cfg.models):
        row = {
            "dataset": dataset_label(n_items, n_resp),
            "dataset_index": ds_index,
            "n_items": n_items,
            "n_respondents": n_resp,
            "model": kind.value,
            "replication": replication,
            "seed": seed,
        }
        try:
            result = fit(p, dataclasses.replace(fit_cfg, seed=seed))
        except FitDivergedError as exc:
            logger.warning("%s %s rep %d diverged: %s", row["dataset"], kind.value,
                           replication, exc)
            row.update(status="failed", error=str(exc), stats=None, converged_at=None,
                       truth=truth, estimates=None)
            rows.append(row)
            continue
        est = result.params
        stats = recovery_stats(truth.theta, est.theta, truth.delta, est.delta,
                               truth.a, est.a, result.pseudo_r2)
        row.update(status="ok", error=None, stats=stats.to_dict(),
                   converged_at=result.converged_at, truth=truth,
                   estimates={"theta": est.theta, "delta": est.delta, "a": est.a})
        rows.append(row)
    return rows


def _task(args):
    cfg, ds_index, replication = args
    return _run_replication(cfg, ds_index, replication)


@dataclass
class RecoveryReport:
    config: ExperimentConfig
    replications: list[dict]
    intervals: list[dict]
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        reps = [
            {k: v for k, v in r.items() if k not in ("truth", "estimates")}
            for r in self.replications
        ]
        out = {
            "schema_version": SCHEMA_VERSION,
            "software_version": __version__,
            "config": self.config.to_dict(),
            "replications": reps,
            "intervals": self.intervals,
            "n_failed": sum(r["status"] != "ok" for r in self.replications),
        }
        if include_timing:
            out["run"] = {"wall_clock_seconds": self.wall_clock_seconds}
        return out

    def interval(self, dataset: str, model: str, metric: str) -> dict:
        for iv in self.intervals:
            if (iv["dataset"], iv["model"], iv["metric"]) == (dataset, model, metric):
                return iv
        raise KeyError((dataset, model, metric))

    def values(self, dataset: str, model: str, metric: str) -> np.ndarray:
        return np.array([
            r["stats"][metric] for r in self.replications
            if r["dataset"] == dataset and r["model"] == model and r["status"] == "ok"
        ])

    def mean(self, dataset: str, model: str, metric: str) -> float:
        v = self.values(dataset, model, metric)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else float("nan")


def _intervals(cfg: ExperimentConfig, rows: list[dict]) -> list[dict]:
    out = []
    for ds_index, (n_items, n_resp) in enumerate(cfg.datasets):
        label = dataset_label(n_items, n_resp)
        for m_index, (kind, _) in enumerate(_ordered(cfg.models)):
            group = [r for r in rows if r["dataset_index"] == ds_index and r["model"] == kind.value]
            for k_index, metric in enumerate(METRICS):
                vals = np.array([r["stats"][metric] for r in group if r["status"] == "ok"],
                                dtype=float)
                finite = vals[np.isfinite(vals)]
                entry = {
                    "dataset": label,
                    "model": kind.value,
                    "metric": metric,
                    "n_values": int(finite.size),
                    "n_excluded": len(group) - int(finite.size),
                    "mean": float(finite.mean()) if finite.size else None,
                    "lo": None,
                    "hi": None,
                    "level": cfg.level,
                    "n_resamples": cfg.n_resamples,
                }
                if finite.size >= 2:
                    ci = bootstrap_ci(finite, cfg.level, cfg.n_resamples,
                                      seed=[cfg.base_seed, ds_index, m_index, k_index])
                    entry["lo"], entry["hi"] = ci.lo, ci.hi
                out.append(entry)
    return out


def run_recovery_experiment(cfg: ExperimentConfig, workers: int = 1,
                            progress=None) -> RecoveryReport:
    """Simulate, fit every model variant and aggregate recovery statistics.

    Results are sorted by (dataset, model, replication) before aggregation,
    so the report does not depend on ``workers``. A diverged fit is recorded
    with ``status="failed"`` and excluded from the intervals.
    """
    start = time.perf_counter()
    tasks = [(cfg, d, r) for d in range(len(cfg.datasets)) for r in range(cfg.n_replications)]
    rows: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(_task, tasks), start=1):
                rows.extend(res)
                if progress:
                    progress(i, len(tasks))
    else:
        for i, t in enumerate(tasks, start=1):
            rows.extend(_task(t))
            if progress:
                progress(i, len(tasks))
    model_rank = {k.value: i for i, k in enumerate(MODEL_ORDER)}
    rows.sort(key=lambda r: (r["dataset_index"], model_rank[r["model"]], r["replication"]))
    return RecoveryReport(cfg, rows, _intervals(cfg, rows), time.perf_counter() - start)


STATS_COLUMNS = ["dataset", "n_items", "n_respondents", "model", "replication", "seed",
                 "status", *METRICS, "pseudo_r2_fit", "converged_at"]
SCATTER_COLUMNS = ["dataset", "model", "replication", "kind", "index", "true", "estimated",
                   "flipped"]


def write_report(report: RecoveryReport, out_dir) -> dict[str, Path]:
    """Write ``report.json``, ``replications.csv`` and ``scatter.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out_dir / "report.json",
        "replications": out_dir / "replications.csv",
        "scatter": out_dir / "scatter.csv",
    }
    write_json(paths["report"], report.to_dict())

    with open(paths["replications"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for r in report.replications:
            stats = r["stats"] or {}
            w.writerow([
                r["dataset"], r["n_items"], r["n_respondents"], r["model"], r["replication"],
                r["seed"], r["status"],
                *[fmt(stats.get(m)) for m in (*METRICS, "pseudo_r2_fit")],
                "" if r["converged_at"] is None else r["converged_at"],
            ])

    with open(paths["scatter"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_COLUMNS)
        for r in report.replications:
            if r["estimates"] is None:
                continue
            truth: TrueParams = r["truth"]
            for kind in ("a", "theta", "delta"):
                t_vals = getattr(truth, kind)
                e_vals = r["estimates"][kind]
                for i, (tv, ev) in enumerate(zip(t_vals, e_vals)):
                    flipped = int(kind == "a" and sign_flip_rate([tv], [ev]) > 0)
                    w.writerow([r["dataset"], r["model"], r["replication"], kind, i,
                                fmt(tv), fmt(ev), flipped])
    return paths


FIT_KEYS = {"learning_rate", "n_epochs", "n_inits", "tol", "loss", "freeze_tau", "reduction"}


def _fit_overrides(cf: ConfigFile, section: str) -> dict:
    cf.unknown_keys(section, FIT_KEYS)
    out = {}
    for key, conv in (("learning_rate", float), ("n_epochs", int), ("n_inits", int),
                      ("tol", float), ("reduction", str)):
        if cf.has(section, key):
            out[key] = cf.get(section, key, conv)
    if cf.has(section, "loss"):
        out["loss_kind"] = cf.get(section, "loss", LossKind)
    if cf.has(section, "freeze_tau"):
        out["freeze_tau"] = cf.get(section, "freeze_tau", parse_bool)
    return out


def load_gen_settings(cf: ConfigFile, section: str = "generate") -> dict:
    """Generation keys shared by ``generate`` and ``recover`` configs."""
    allowed = {"m", "n", "n_draws", "sigma0_sq", "ability_dist", "difficulty_dist",
               "discrimination_mean", "seed"}
    cf.unknown_keys(section, allowed)
    out = {}
    for key, conv in (("n_draws", int), ("sigma0_sq", float), ("ability_dist", parse_pair),
                      ("difficulty_dist", parse_pair), ("discrimination_mean", float)):
        if cf.has(section, key):
            out[key] = cf.get(section, key, conv)
    return out


def load_experiment_config(path) -> ExperimentConfig:
    """Parse an INI experiment file.

    Sections: ``[experiment]`` (datasets, n_replications, base_seed, level,
    n_resamples), ``[generate]``, ``[fit]`` with defaults shared by all models,
    and one ``[model:<name>]`` per variant (beta3, beta4, beta4-nopriors) that
    may override fit keys. Without model sections all three variants run.
    """
    cf = ConfigFile(path)
    sec = "experiment"
    cf.unknown_keys(sec, {"datasets", "n_replications", "base_seed", "level", "n_resamples"})
    datasets = cf.get(sec, "datasets", parse_shapes, required=True)
    n_rep = cf.get(sec, "n_replications", int, required=True)
    if n_rep < 1:
        raise cf.error(sec, "n_replications", "must be a positive integer")
    base_seed = cf.get(sec, "base_seed", int, default=0)
    level = cf.get(sec, "level", float, default=0.95)
    if not 0 < level < 1:
        raise cf.error(sec, "level", "must lie in (0, 1)")
    n_resamples = cf.get(sec, "n_resamples", int, default=10000)
    if n_resamples < 1:
        raise cf.error(sec, "n_resamples", "must be a positive integer")

    try:
        gen = GenConfig(M=1, N=1, **load_gen_settings(cf))
    except ValueError as exc:
        raise cf.error("generate", "n_draws", str(exc)) from None

    shared = _fit_overrides(cf, "fit")
    model_sections = [s for s in cf.sections() if s.startswith("model:")]
    unknown = set(cf.sections()) - {"experiment", "generate", "fit", *model_sections}
    if unknown:
        raise InputError(cf.path, f"unknown section(s): {', '.join(sorted(unknown))}")
    models = {}
    names = [s.split(":", 1)[1].strip() for s in model_sections] or [k.value for k in MODEL_ORDER]
    for name, section in zip(names, model_sections or [None] * len(names)):
        try:
            kind = ModelKind(name)
        except ValueError:
            raise InputError(cf.path, f"unknown model {name!r}", None, section) from None
        settings = dict(shared)
        if section:
            settings.update(_fit_overrides(cf, section))
        try:
            models[kind] = FitConfig(model_kind=kind, **settings)
        except ValueError as exc:
            raise InputError(cf.path, str(exc), None, section or "fit") from None
    return ExperimentConfig(
        datasets=tuple(datasets),
        n_replications=n_rep,
        models=models,
        gen=gen,
        base_seed=base_seed,
        level=level,
        n_resamples=n_resamples,
    )

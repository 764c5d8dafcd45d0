"""Command line entry point: ``beta-irt {generate,fit,recover,gradcheck}``.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .core import UnconstrainedParams
from .experiment import (
    ExperimentConfig,
    load_experiment_config,
    load_gen_settings,
    run_recovery_experiment,
    write_report,
)
from .files import (
    ConfigFile,
    InputError,
    param_rows,
    read_matrix_csv,
    read_params_csv,
    write_json,
    write_matrix_csv,
    write_params_csv,
)
from .fit import (
    FitConfig,
    FitDivergedError,
    LossKind,
    ModelKind,
    analytic_gradients,
    finite_diff_gradients,
    fit,
)
from .synth import GenConfig, generate_responses, sample_true_params, streams

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

log = logging.getLogger("beta_irt")


def cmd_generate(args) -> int:
    cf = ConfigFile(args.config)
    settings = load_gen_settings(cf)
    M = cf.get("generate", "m", int, required=True)
    N = cf.get("generate", "n", int, required=True)
    seed = args.seed if args.seed is not None else cf.get("generate", "seed", int, default=0)
    try:
        gen = GenConfig(M=M, N=N, seed=seed, **settings)
    except ValueError as exc:
        raise InputError(cf.path, str(exc), None, "generate") from None
    params_rng, responses_rng = streams(seed)
    truth = sample_true_params(gen, params_rng)
    p = generate_responses(truth, gen, responses_rng)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "responses.csv", p)
    write_params_csv(out / "truth.csv", [
        *param_rows("theta", true=truth.theta),
        *param_rows("delta", true=truth.delta),
        *param_rows("a", true=truth.a),
    ])
    print(f"wrote {M}x{N} responses and true parameters to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    p = read_matrix_csv(args.responses)
    truth = read_params_csv(args.truth) if args.truth else {}
    config = FitConfig(
        learning_rate=args.lr,
        n_epochs=args.epochs,
        n_inits=args.n_inits,
        tol=args.tol,
        seed=args.seed,
        model_kind=ModelKind(args.model),
        loss_kind=LossKind(args.loss),
        freeze_tau=args.freeze_tau,
    )
    result = fit(p, config)
    est = result.params

    def true_of(kind, n):
        vals = truth.get(kind, {}).get("true")
        if vals is None:
            return None
        if len(vals) != n:
            raise InputError(args.truth, f"{kind!r} has {len(vals)} values, expected {n}")
        return vals

    rows = [
        *param_rows("theta", true_of("theta", est.M), est.theta),
        *param_rows("delta", true_of("delta", est.N), est.delta),
        *param_rows("a", true_of("a", est.N), est.a),
    ]
    if est.omega is not None:
        rows += [*param_rows("omega", estimated=est.omega), *param_rows("tau", estimated=est.tau)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_params_csv(out / "params.csv", rows)
    write_matrix_csv(out / "predicted.csv", result.predicted)
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, h in result.loss_trace:
            fh.write(f"{epoch},{h:.17g}\n")
    write_json(out / "summary.json", {
        "pseudo_r2": result.pseudo_r2,
        "converged_at": result.converged_at,
        "epochs_run": len(result.loss_trace),
        "final_loss": result.loss_trace[-1][1],
        "config": {
            "model": config.model_kind.value,
            "loss": config.loss_kind.value,
            "learning_rate": config.learning_rate,
            "n_epochs": config.n_epochs,
            "n_inits": config.n_inits,
            "tol": config.tol,
            "seed": config.seed,
            "freeze_tau": config.freeze_tau,
            "reduction": config.reduction,
        },
    })
    print(f"pseudo-R2 = {result.pseudo_r2:.6f}"
          + (f" (converged at epoch {result.converged_at})" if result.converged_at else ""))
    return EXIT_OK


def _progress(done: int, total: int) -> None:
    print(f"\r{done}/{total} replications", end="" if done < total else "\n",
          file=sys.stderr, flush=True)


def format_summary(report) -> str:
    lines = [f"{'dataset':<16}{'model':<16}{'metric':<11}{'mean':>10}  95% CI"]
    for iv in report.intervals:
        mean = "nan" if iv["mean"] is None else f"{iv['mean']:.4f}"
        ci = "-" if iv["lo"] is None else f"[{iv['lo']:.4f}, {iv['hi']:.4f}]"
        lines.append(f"{iv['dataset']:<16}{iv['model']:<16}{iv['metric']:<11}{mean:>10}  {ci}")
    return "\n".join(lines)


def cmd_recover(args) -> int:
    cfg: ExperimentConfig = load_experiment_config(args.config)
    report = run_recovery_experiment(cfg, workers=args.workers,
                                     progress=None if args.quiet else _progress)
    paths = write_report(report, args.out)
    if not args.quiet:
        print(format_summary(report))
    print(f"report written to {paths['report']}")
    return EXIT_OK


def run_gradcheck(trials: int = 20, h: float = 1e-5, seed: int = 0,
                  max_size: int = 10) -> float:
    """Worst relative gradient error over random instances, both model
    families and both losses.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        M, N = rng.integers(1, max_size + 1, size=2)
        p = rng.uniform(0.02, 0.98, size=(M, N))
        t, d = rng.uniform(-3, 3, M), rng.uniform(-3, 3, N)
        candidates = [
            UnconstrainedParams(t, d, o=rng.uniform(-2, 2, N), b=rng.uniform(-2, 2, N)),
            UnconstrainedParams(t, d, a=rng.uniform(-3, 3, N)),
        ]
        for u in candidates:
            for kind in LossKind:
                ga = analytic_gradients(p, u, kind).to_vector()
                gf = finite_diff_gradients(p, u, h, kind).to_vector()
                scale = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-6)
                worst = max(worst, float(np.max(np.abs(ga - gf) / scale)))
    return worst


def cmd_gradcheck(args) -> int:
    worst = run_gradcheck(args.trials, args.h, args.seed)
    ok = worst < args.threshold
    print(f"max relative error {worst:.3e} over {args.trials} instances "
          f"(threshold {args.threshold:.0e}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beta-irt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate true parameters and responses")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model to a response matrix")
    f.add_argument("--responses", required=True)
    f.add_argument("--model", choices=[k.value for k in ModelKind], default="beta4")
    f.add_argument("--epochs", type=int, default=10000)
    f.add_argument("--n-inits", type=int, default=1000)
    f.add_argument("--lr", type=float, default=1.0)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--loss", choices=[k.value for k in LossKind], default="full-ce")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--freeze-tau", dest="freeze_tau", action="store_true", default=None)
    f.add_argument("--no-freeze-tau", dest="freeze_tau", action="store_false")
    f.add_argument("--truth", help="parameter CSV whose true column is copied into the output")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("recover", help="run a Monte Carlo recovery experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_recover)

    c = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--threshold", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FitDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

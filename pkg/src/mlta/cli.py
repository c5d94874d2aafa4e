"""Command-line front end: simulate / fit / select / bootstrap / evaluate /
replicate, all seeded and deterministic.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.  Output
files are written atomically (temp file + rename) and identical command
lines produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .data import (DataError, NumericalError, _atomic_write_text,
                   load_network, read_model, write_model, write_network)
from .em import FitConfig, fit_multistart
from .inference import bootstrap_se, flatten_params, param_names, write_bootstrap_csv
from .metrics import evaluate, write_eval
from .selection import GridSpec, select_model, write_bic_table
from .simulate import SimSpec, read_truth, simulate_network, write_truth
from .study import run_study
from .data import ModelDims

DEFAULTS = {
    "starts": 10,
    "tol": 1e-6,
    "max_iter": 500,
    "inner_iters": 100,
    "boot": 100,
    "seed": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the CLI reserves 2 for
    # numerical failure, so usage problems are rerouted through UsageError.
    def error(self, message):
        raise UsageError(message)


def parse_range(text: str) -> tuple[int, int]:
    """`a..b` (inclusive) or a single integer."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return int(lo), int(hi)
        v = int(text)
        return v, v
    except ValueError:
        raise UsageError(f"invalid range '{text}', expected 'a..b' or 'a'") from None


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MLTA_THREADS")
    try:
        return int(env) if env else 1
    except ValueError:
        raise UsageError(f"MLTA_THREADS must be an integer, got {env!r}") from None


def _fit_config(args) -> FitConfig:
    return FitConfig(n_starts=args.starts, max_outer_iters=args.max_iter,
                     outer_tol=args.tol, inner_iters=args.inner_iters,
                     seed=args.seed)


def _print_config(args) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + json.dumps(resolved, sort_keys=True, default=str))


def _add_fit_flags(p) -> None:
    p.add_argument("--starts", type=int, default=DEFAULTS["starts"])
    p.add_argument("--tol", type=float, default=DEFAULTS["tol"])
    p.add_argument("--max-iter", type=int, default=DEFAULTS["max_iter"],
                   dest="max_iter")
    p.add_argument("--inner-iters", type=int, default=DEFAULTS["inner_iters"],
                   dest="inner_iters")
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap; falls back to MLTA_THREADS, then 1")


def _cmd_simulate(args) -> int:
    spec = SimSpec(N=args.N, R=args.R, H=args.H, G=args.G, D=args.D,
                   Q=args.Q, seed=args.seed)
    data, truth = simulate_network(spec)
    write_network(data, args.out)
    if args.truth:
        write_truth(truth, args.truth)
    print(f"wrote {args.out}" + (f" and {args.truth}" if args.truth else ""))
    return 0


def _cmd_fit(args) -> int:
    data = load_network(args.input)
    dims = ModelDims(G=args.G, D=args.D, Q=args.Q,
                     parsimonious=args.parsimonious)
    cfg = _fit_config(args)
    fit = fit_multistart(data, dims, cfg, threads=_resolve_threads(args.threads))
    write_model(fit, args.out)
    print(f"loglik={fit.loglik!r} bic={fit.bic!r} converged={fit.converged} "
          f"start={fit.start_index} -> {args.out}")
    return 0


def _cmd_select(args) -> int:
    data = load_network(args.input)
    grid = GridSpec(G_range=parse_range(args.G), D_range=parse_range(args.D),
                    Q_range=parse_range(args.Q),
                    parsimonious=args.parsimonious)
    cfg = _fit_config(args)
    best, table = select_model(data, grid, cfg,
                               threads=_resolve_threads(args.threads))
    write_bic_table(table, args.out)
    if args.best:
        write_model(best, args.best)
    print(f"best: G={best.dims.G} D={best.dims.D} Q={best.dims.Q} "
          f"bic={best.bic!r} -> {args.out}")
    return 0


def _cmd_bootstrap(args) -> int:
    data = load_network(args.input)
    fitted = read_model(args.model)
    cfg = _fit_config(args)
    result = bootstrap_se(data, fitted.dims, fitted, args.boot, cfg,
                          threads=_resolve_threads(args.threads),
                          multistart_replicates=args.multistart)
    names = param_names(fitted.dims, data.R, data.J)
    write_bootstrap_csv(result, names, flatten_params(fitted.params), args.out)
    print(f"{result.S} replicates kept, {result.n_failed} failed -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    fit = read_model(args.model)
    truth = read_truth(args.truth)
    report = evaluate(fit, truth)
    write_eval(report, args.out)
    print(f"ari_nodes={report.ari_nodes!r} ari_layers={report.ari_layers!r} "
          f"-> {args.out}")
    return 0


def _cmd_replicate(args) -> int:
    scenario = SimSpec(N=args.N, R=args.R, H=args.H, G=args.G, D=args.D,
                       Q=args.Q, seed=args.seed)
    cfg = _fit_config(args)
    study = run_study(scenario, args.B, cfg,
                      threads=_resolve_threads(args.threads))

    ari_lines = ["target,mean,median"]
    for name, values in (("nodes", study.ari_nodes), ("layers", study.ari_layers)):
        ari_lines.append(f"{name},{np.mean(values)!r},{np.median(values)!r}")
    _atomic_write_text(args.ari_out, "\n".join(ari_lines) + "\n")

    J = 2  # intercept + single scenario covariate
    mse_lines = ["param,mse"]
    beta_means = study.mse_beta.mean(axis=0)
    for g in range(args.G - 1):
        for j in range(J):
            mse_lines.append(f"beta_g{g + 2}_j{j},{beta_means[g * J + j]!r}")
    for q, v in enumerate(study.mse_gamma.mean(axis=0)):
        mse_lines.append(f"gamma_contrast_q{q + 1},{v!r}")
    for q, v in enumerate(study.mse_rho.mean(axis=0)):
        mse_lines.append(f"rho_q{q + 1},{v!r}")
    _atomic_write_text(args.mse_out, "\n".join(mse_lines) + "\n")

    print(f"B={args.B}: node ARI mean={np.mean(study.ari_nodes)!r}, "
          f"layer ARI mean={np.mean(study.ari_layers)!r} "
          f"-> {args.ari_out}, {args.mse_out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlta",
                     description="Multilevel latent-trait clustering of "
                                 "multi-layer bipartite networks")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic network with truth")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--R", type=int, required=True)
    p.add_argument("--H", type=int, required=True)
    p.add_argument("--G", type=int, default=3)
    p.add_argument("--D", type=int, default=1)
    p.add_argument("--Q", type=int, default=2)
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    p.add_argument("--out", required=True)
    p.add_argument("--truth", default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit one model specification")
    p.add_argument("--input", required=True)
    p.add_argument("--G", type=int, required=True)
    p.add_argument("--D", type=int, required=True)
    p.add_argument("--Q", type=int, required=True)
    p.add_argument("--parsimonious", action="store_true")
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("select", help="BIC grid search over (G, D, Q)")
    p.add_argument("--input", required=True)
    p.add_argument("--G", required=True, help="range a..b or single value")
    p.add_argument("--D", required=True)
    p.add_argument("--Q", required=True)
    p.add_argument("--parsimonious", action="store_true")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="BIC table CSV")
    p.add_argument("--best", default=None, help="optional model.json for the winner")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("bootstrap", help="stratified bootstrap standard errors")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--boot", type=int, default=DEFAULTS["boot"])
    p.add_argument("--multistart", action="store_true",
                   help="re-fit replicates from random starts instead of "
                        "warm-starting at the point estimate")
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bootstrap)

    p = sub.add_parser("evaluate", help="score a fit against simulation truth")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("replicate",
                       help="replicated simulation study (parsimonious fit)")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--R", type=int, required=True)
    p.add_argument("--H", type=int, required=True)
    p.add_argument("--G", type=int, default=3)
    p.add_argument("--D", type=int, default=1)
    p.add_argument("--Q", type=int, default=2)
    p.add_argument("--B", type=int, required=True)
    _add_fit_flags(p)
    p.add_argument("--ari-out", default="ari_summary.csv", dest="ari_out")
    p.add_argument("--mse-out", default="mse_summary.csv", dest="mse_out")
    p.set_defaults(func=_cmd_replicate)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _print_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

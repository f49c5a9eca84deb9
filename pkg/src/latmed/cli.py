"""Command-line interface: fit, simulate, and mc subcommands.

Exit codes are script-friendly: 1 for usage problems, 2 for data or
configuration file problems, 3 for numerical estimation failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import ConfigError, DataError, NumericalError
from .harness import parse_selector, run_grid, write_csv
from .inference import bootstrap, wald_test
from .model import load_model_spec, save_model_spec
from .pipeline import METHODS, fit_pipeline
from .simgen import (
    StudyCondition,
    default_model_spec,
    generate,
    study1_grid,
    study2_grid,
)
from .structural import DEFAULT_RIDGE, DEFAULT_TAU, G_ESTIMATION, MAX_TAU

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

FIT_COLUMNS = (
    "parameter", "method", "estimate", "se", "z", "p",
    "rank_flag", "shrink_factor", "lambda_hat", "cond_number", "boot_failures",
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; remap to the usage code."""

    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="latmed", description=__doc__)
    parser.add_argument("--version", action="version", version=f"latmed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate a mediation model from a CSV dataset")
    fit.add_argument("--data", required=True, help="CSV with indicator and treatment columns")
    fit.add_argument("--model", required=True, help="JSON model specification")
    fit.add_argument("--out", required=True, help="output directory")
    _common_numeric_flags(fit)
    fit.add_argument("--bootstrap", type=int, default=100, metavar="B",
                     help="bootstrap replicates for standard errors (default 100)")

    sim = sub.add_parser("simulate", help="write one synthetic dataset")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--n", type=int, required=True, help="sample size")
    sim.add_argument("--delta-u", type=float, default=0.0)
    sim.add_argument("--delta-ur", type=float, default=0.0)
    sim.add_argument("--kappa", type=float, default=0.75)
    sim.add_argument("--theta-m", type=float, default=0.0)
    sim.add_argument("--gamma-xr", type=float, default=0.204)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--true-scores", action="store_true",
                     help="also write the latent scores side file")

    mc = sub.add_parser("mc", help="run Monte Carlo study cells")
    mc.add_argument("--study", type=int, choices=(1, 2), required=True)
    mc.add_argument("--out", required=True, help="output directory")
    mc.add_argument("--select", action="append", default=[], metavar="KEY=VALUE",
                    help="restrict to matching cells (repeatable)")
    mc.add_argument("--reps", type=int, default=100, metavar="R")
    mc.add_argument("--bootstrap", type=int, default=100, metavar="B")
    mc.add_argument("--jobs", type=int, default=1)
    mc.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    _common_numeric_flags(mc)
    return parser


def _common_numeric_flags(sub):
    sub.add_argument("--tau", type=float, default=DEFAULT_TAU,
                     help=f"moment shrinkage tuning constant in [0, {MAX_TAU:g}] (default {DEFAULT_TAU:g})")
    sub.add_argument("--ridge", type=float, default=DEFAULT_RIDGE,
                     help=f"ridge term added to the moment matrix (default {DEFAULT_RIDGE:g})")
    sub.add_argument("--alpha", type=float, default=0.05)
    sub.add_argument("--seed", type=int, default=0)


def _validate_common(args):
    if not 0.0 <= args.tau <= MAX_TAU:
        raise _UsageError(f"--tau must lie in [0, {MAX_TAU:g}], got {args.tau:g}")
    if args.ridge < 0:
        raise _UsageError("--ridge must be nonnegative")
    if not 0.0 < args.alpha < 1.0:
        raise _UsageError("--alpha must lie in (0, 1)")


def cmd_fit(args) -> int:
    _validate_common(args)
    if args.bootstrap < 2:
        raise _UsageError("--bootstrap must be at least 2")
    spec = load_model_spec(args.model)
    try:
        data = pd.read_csv(args.data)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read data file {args.data}: {exc}") from exc

    result = fit_pipeline(data, spec, tau=args.tau, v=args.ridge)
    boots = bootstrap(
        data, spec, METHODS, B=args.bootstrap, seed=args.seed,
        tau=args.tau, v=args.ridge, baseline=result,
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in METHODS:
        est = result.estimates[method]
        boot = boots[method]
        check = est.rank_check
        for name, value, se in zip(est.names, est.theta, boot.se):
            row = {
                "parameter": name, "method": method,
                "estimate": float(value), "se": float(se),
                "rank_flag": bool(check.flagged) if check else False,
                "shrink_factor": est.shrink_factor,
                "lambda_hat": est.lambda_hat,
                "cond_number": est.cond_number,
                "boot_failures": boot.failures,
            }
            if np.isfinite(se) and se > 0:
                test = wald_test(float(value), float(se), args.alpha)
                row["z"], row["p"] = test.z, test.p_value
            else:
                row["z"], row["p"] = float("nan"), float("nan")
            rows.append(row)
    path = write_csv(out_dir / "estimates.csv", FIT_COLUMNS, rows)

    print(f"estimates written to {path}")
    for method in METHODS:
        est = result.estimates[method]
        boot = boots[method]
        print(f"\n[{method}]  (shrink {est.shrink_factor:.3f}, ridge {est.ridge:g}, "
              f"bootstrap {boot.n_success}/{boot.n_requested})")
        for name, value, se in zip(est.names, est.theta, boot.se):
            stars = ""
            if np.isfinite(se) and se > 0:
                p = wald_test(float(value), float(se), args.alpha).p_value
                stars = " *" if p < args.alpha else ""
            print(f"  {name:<12} {value:+.4f}  (se {se:.4f}){stars}")
    if result.heywood_count:
        print(f"\nwarning: {result.heywood_count} residual variances at the lower bound")

    g_check = result.estimates[G_ESTIMATION].rank_check
    if g_check is not None and g_check.flagged:
        print(
            "\nerror: moment matrix not invertible: the mediator model needs at least "
            f"one treatment-covariate interaction ({g_check.reason})",
            file=sys.stderr,
        )
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise _UsageError("--n must be at least 1")
    try:
        condition = StudyCondition(
            n_obs=args.n, delta_u=args.delta_u, delta_ur=args.delta_ur,
            kappa=args.kappa, theta_m=args.theta_m, gamma_xr=args.gamma_xr,
            seed=args.seed,
        )
    except ConfigError as exc:
        raise _UsageError(str(exc)) from exc
    dataset = generate(condition)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = dataset.data_frame()
    data_rows = data.to_dict("records")
    path = write_csv(out_dir / "data.csv", tuple(data.columns), data_rows)
    save_model_spec(default_model_spec(), out_dir / "model.json")
    print(f"dataset ({len(data)} rows) written to {path}")
    if args.true_scores:
        scores = dataset.scores_frame()
        spath = write_csv(out_dir / "true_scores.csv", tuple(scores.columns), scores.to_dict("records"))
        print(f"latent scores written to {spath}")
    return EXIT_OK


def cmd_mc(args) -> int:
    _validate_common(args)
    if args.reps < 1:
        raise _UsageError("--reps must be at least 1")
    if args.bootstrap < 2:
        raise _UsageError("--bootstrap must be at least 2")
    if args.jobs < 1:
        raise _UsageError("--jobs must be at least 1")
    select = parse_selector(args.select)
    grid = study1_grid() if args.study == 1 else study2_grid()

    def progress(done, total, result):
        for s in result.summaries:
            print(
                f"[{done}/{total}] {s.condition.label()} {s.method}: "
                f"bias {s.mean_bias:+.4f}, rate {s.rejection_rate:.3f}, "
                f"failed {s.n_failed}, flags {s.rank_flags}"
            )

    results, paths = run_grid(
        grid, R=args.reps, B=args.bootstrap,
        tau=args.tau, v=args.ridge, master_seed=args.seed, alpha=args.alpha,
        select=select, jobs=args.jobs, out_dir=args.out, progress=progress,
    )
    if not results:
        raise _UsageError("selector matched no cells")
    for p in paths:
        print(f"wrote {p}")
    if not args.no_figures:
        from .figures import render_mc_figures

        for p in render_mc_figures(results, args.out):
            print(f"wrote {p}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_mc(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

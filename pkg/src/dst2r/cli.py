"""Command-line entry point.

Subcommands::

    dst2r simulate  --scenario 3d3d --seed 7 --out data/
    dst2r fit       --data data/ --out fit/ [--config solver.json] [--cv]
    dst2r evaluate  --data data/ --model fit/model.json --out report.csv
    dst2r bench     [--manifest run.json] --scenario 3d3d --reps 30 --out table.csv
    dst2r sweep-epsilon --scenario 2d2d-sweep --epsilon 0.01,0.1,1 --out sweep.csv --plot sweep.svg

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .evaluation import BENCH_COLUMNS, bench_rows_csv, evaluate_model
from .experiments import (
    SWEEP_EPSILONS,
    RunManifest,
    bench,
    cross_validate,
    plot_sweep,
    sweep_epsilon,
    sweep_rows_csv,
)
from .model import load_model, save_model
from .simulation import SCENARIOS, SimSpec, generate_dataset, load_dataset, make_scenario, save_dataset
from .solver import SolverConfig, fit
from .tensor import DimensionError, FormatError

logger = logging.getLogger("dst2r")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EVAL_COLUMNS = ("estimation_error", "relative_error", "tpr", "fpr", "tpr_sum", "fpr_sum",
                "coverage", "tpr_per_mode", "fpr_per_mode")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_sim_flags(p):
    p.add_argument("--scenario", choices=sorted(SCENARIOS), default="3d3d")
    p.add_argument("--scale", type=float, default=1.0, help="shrink extents and samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--noise-sd", type=float)


def _add_solver_flags(p):
    p.add_argument("--config", help="solver settings as JSON")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda-floor", type=float)
    p.add_argument("--refit-passes", type=int)
    p.add_argument("--max-iters", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dst2r", description=__doc__.split("\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic dataset directory")
    _add_sim_flags(p)
    p.add_argument("--spec", help="SimSpec as JSON (overrides scenario flags)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", help="fit a model to a dataset directory",
                       description="Writes model.json and trace.csv (columns: sweep, rank, "
                                   "iteration, lambda, J, L, R, stage, direction, k, i_k, s).")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rank", type=int, help="default: the rank recorded in the dataset")
    _add_solver_flags(p)
    p.add_argument("--cv", action="store_true", help="choose alpha and epsilon by 5-fold CV")
    p.add_argument("--cv-alphas", type=_float_list, default=[0.0, 0.01, 0.1])
    p.add_argument("--cv-epsilons", type=_float_list, default=[0.05, 0.1, 0.2])

    p = sub.add_parser("evaluate", help="score a model against a dataset's true model",
                       description="CSV columns: " + ", ".join(EVAL_COLUMNS))
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("bench", help="repeated simulation table",
                       description="CSV columns: " + ", ".join(BENCH_COLUMNS))
    p.add_argument("--manifest", help="RunManifest as JSON; flags override its fields")
    p.add_argument("--scenario", choices=sorted(SCENARIOS))
    p.add_argument("--scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--reps", type=int)
    _add_solver_flags(p)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("sweep-epsilon", help="error and sparsity coverage across step sizes",
                       description="CSV columns: epsilon, error_mean, error_sd, coverage_mean, "
                                   "coverage_sd, reps")
    _add_sim_flags(p)
    p.set_defaults(scenario="2d2d-sweep")
    p.add_argument("--epsilon", dest="epsilons", metavar="LIST", type=_float_list,
                   default=list(SWEEP_EPSILONS),
                   help="comma-separated step sizes")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--config", help="solver settings as JSON")
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda-floor", type=float)
    p.add_argument("--refit-passes", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--plot", help="also write an SVG chart here")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _solver_config(args, base: Optional[dict] = None) -> SolverConfig:
    d = dict(base or {})
    if getattr(args, "config", None):
        d.update(json.loads(Path(args.config).read_text()))
    flags = {"epsilon": "epsilon", "gamma": "gamma", "alpha": "alpha",
             "lambda_floor": "lambda_floor", "refit_passes": "refit_passes",
             "max_iters": "max_iters_per_rank"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    return SolverConfig.from_dict(d)


def _sim_spec(args) -> SimSpec:
    return make_scenario(args.scenario, args.scale, rank=args.rank, sparsity=args.sparsity,
                         n_samples=args.samples, noise_sd=args.noise_sd, seed=args.seed)


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.spec:
        spec = SimSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = _sim_spec(args)
    out = save_dataset(generate_dataset(spec), args.out)
    logger.info("wrote dataset to %s", out)
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = load_dataset(args.data)
    base = {"max_rank": args.rank or ds.spec.rank}
    config = _solver_config(args, base)
    if args.rank:
        config = replace(config, max_rank=args.rank)
    if args.cv:
        config, table = cross_validate(ds.X, ds.Y, config, args.cv_alphas, args.cv_epsilons)
        logger.info("cv picked alpha=%g epsilon=%g", config.alpha, config.epsilon)
    model, trace = fit(ds.X, ds.Y, config)
    if not all(np.all(np.isfinite(f.beta)) for c in model.components for f in c.factors):
        raise NumericFailure("fit produced non-finite factors")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.json", model)
    trace.to_csv(out / "trace.csv")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.cv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "epsilon", "cv_error"])
        for row in table:
            w.writerow([row["alpha"], row["epsilon"], f"{row['cv_error']:.6g}"])
        (out / "cv.csv").write_text(buf.getvalue())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.data)
    if ds.true_model is None:
        raise FileNotFoundError(f"{args.data} has no true model")
    model = load_model(args.model)
    rep = evaluate_model(ds.true_model, model)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    w.writerow([f"{rep.estimation_error:.6g}", f"{rep.relative_error:.6g}", f"{rep.tpr:.6g}",
                f"{rep.fpr:.6g}", f"{rep.tpr_sum:.6g}", f"{rep.fpr_sum:.6g}", f"{rep.coverage:.6g}",
                ";".join(f"{v:.6g}" for v in rep.tpr_per_mode),
                ";".join(f"{v:.6g}" for v in rep.fpr_per_mode)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    d = json.loads(Path(args.manifest).read_text()) if args.manifest else {}
    for attr, key in (("scenario", "scenario"), ("scale", "scale"), ("seed", "seed"),
                      ("reps", "reps"), ("samples", "n_samples"), ("noise_sd", "noise_sd")):
        v = getattr(args, attr)
        if v is not None:
            d[key] = v
    if args.rank is not None:
        d["ranks"] = [args.rank]
    if args.sparsity is not None:
        d["sparsities"] = [args.sparsity]
    d["solver"] = _solver_config(args, d.get("solver")).to_dict()
    manifest = RunManifest.from_dict(d)
    rows = bench(manifest)
    _emit(bench_rows_csv(rows), args.out or manifest.out)
    return EXIT_OK


def cmd_sweep_epsilon(args) -> int:
    if not args.epsilons or any(e <= 0 for e in args.epsilons):
        raise UsageError("epsilon values must be > 0")
    spec = _sim_spec(args)
    config = _solver_config(args)
    rows = sweep_epsilon(spec, args.epsilons, config, reps=args.reps, seed=args.seed)
    _emit(sweep_rows_csv(rows), args.out)
    if args.plot:
        plot_sweep(rows, args.plot)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "sweep-epsilon": cmd_sweep_epsilon,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="raise", invalid="raise"):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dst2r: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, NumericFailure, np.linalg.LinAlgError) as exc:
        print(f"dst2r: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DimensionError, ValueError, KeyError, TypeError) as exc:
        print(f"dst2r: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Repetition harness: benchmark tables, epsilon sweeps and cross-validation.

Jobs are pure functions of their arguments, so they can be fanned out to a
process pool (``DST2R_THREADS`` > 1) and the results sorted before writing;
the output does not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .evaluation import (
    aggregate,
    estimation_error,
    evaluate_model,
    sparse_ols_fit,
    support_rates,
)
from .model import effective_coefficients, predict_batch
from .simulation import SimSpec, generate_dataset, make_scenario
from .solver import SolverConfig, fit

logger = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "RunManifest",
    "job_seed",
    "run_method",
    "bench",
    "sweep_epsilon",
    "sweep_rows_csv",
    "cross_validate",
    "plot_sweep",
    "worker_count",
]

METHODS = ("dst2r", "sparse-ols")
SWEEP_EPSILONS = (0.01, 0.05, 0.1, 0.15, 0.5, 1.0)


def worker_count() -> int:
    raw = os.environ.get("DST2R_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"DST2R_THREADS must be an integer, got {raw!r}") from None


def _map(fn, jobs: Sequence) -> list:
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def job_seed(seed: int, *keys) -> int:
    """Independent 32-bit seed for one cell and repetition."""
    ints = [int(seed)] + [int(round(k * 1000)) if isinstance(k, float) else int(k) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class RunManifest:
    scenario: str = "3d3d"
    scale: float = 1.0
    ranks: List[int] = field(default_factory=list)
    sparsities: List[float] = field(default_factory=list)
    n_samples: Optional[int] = None
    noise_sd: Optional[float] = None
    reps: int = 30
    seed: int = 0
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    solver: dict = field(default_factory=dict)
    out: Optional[str] = None

    def __post_init__(self):
        if int(self.reps) < 1:
            raise ValueError("reps must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
        SolverConfig.from_dict(self.solver)  # validate early

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def cells(self) -> List[SimSpec]:
        base = make_scenario(self.scenario, self.scale, n_samples=self.n_samples,
                             noise_sd=self.noise_sd)
        ranks = self.ranks or [base.rank]
        sparsities = self.sparsities or [base.sparsity]
        return [replace(base, rank=int(r), sparsity=float(s)) for r in ranks for s in sparsities]


def run_method(method: str, spec: SimSpec, config: SolverConfig) -> dict:
    """Generate ``spec``'s dataset and score one method on it."""
    ds = generate_dataset(spec)
    if method == "dst2r":
        cfg = replace(config, max_rank=spec.rank)
        model, _ = fit(ds.X, ds.Y, cfg)
        rep = evaluate_model(ds.true_model, model)
        return dict(error=rep.estimation_error, tpr=rep.tpr, fpr=rep.fpr, tpr_sum=rep.tpr_sum,
                    fpr_sum=rep.fpr_sum, coverage=rep.coverage)
    if method == "sparse-ols":
        ols = sparse_ols_fit(ds.X, ds.Y)
        true_coef = np.asarray(effective_coefficients(ds.true_model))
        tpr, fpr, cov = support_rates(true_coef, ols.coef)
        return dict(error=estimation_error(true_coef, ols.coef), tpr=tpr, fpr=fpr,
                    tpr_sum=math.nan, fpr_sum=math.nan, coverage=cov)
    raise ValueError(f"unknown method {method!r}")


def _bench_job(job):
    method, spec, cfg = job
    try:
        return run_method(method, spec, cfg)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("%s failed on seed %d: %s", method, spec.seed, exc)
        return None


def bench(manifest: RunManifest) -> List[dict]:
    """One aggregate row per (rank, sparsity, method); failed reps are counted, not averaged."""
    config = SolverConfig.from_dict(manifest.solver)
    jobs, keys = [], []
    for cell in manifest.cells():
        for rep in range(manifest.reps):
            spec = replace(cell, seed=job_seed(manifest.seed, cell.rank, cell.sparsity, rep))
            for method in manifest.methods:
                jobs.append((method, spec, config))
                keys.append((cell.rank, cell.sparsity, method))
    results = _map(_bench_job, jobs)

    grouped: Dict[Tuple, List[Optional[dict]]] = {}
    for key, res in zip(keys, results):
        grouped.setdefault(key, []).append(res)
    rows = []
    for (rank, sparsity, method), res in sorted(grouped.items()):
        ok = [r for r in res if r is not None]
        row = dict(rank=rank, sparsity=sparsity, method=method, reps=len(ok),
                   failed=len(res) - len(ok))
        row["error_mean"], row["error_sd"] = aggregate([r["error"] for r in ok])
        for name in ("tpr", "fpr", "tpr_sum", "fpr_sum", "coverage"):
            row[name] = aggregate([r[name] for r in ok])[0]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Epsilon sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("epsilon", "error_mean", "error_sd", "coverage_mean", "coverage_sd", "reps")


def _sweep_job(job):
    spec, cfg = job
    ds = generate_dataset(spec)
    model, _ = fit(ds.X, ds.Y, cfg)
    rep = evaluate_model(ds.true_model, model)
    return rep.estimation_error, rep.coverage


def sweep_epsilon(spec: SimSpec, epsilons: Sequence[float], config: SolverConfig,
                  reps: int = 1, seed: int = 0) -> List[dict]:
    """Mean error and sparsity coverage per step size; datasets are shared across step sizes."""
    if not epsilons:
        raise ValueError("need at least one epsilon")
    specs = [replace(spec, seed=job_seed(seed, rep)) for rep in range(reps)]
    jobs = [(s, replace(config, epsilon=float(e), max_rank=spec.rank))
            for e in epsilons for s in specs]
    results = _map(_sweep_job, jobs)
    rows = []
    for i, e in enumerate(epsilons):
        chunk = results[i * reps:(i + 1) * reps]
        err_m, err_sd = aggregate([c[0] for c in chunk])
        cov_m, cov_sd = aggregate([c[1] for c in chunk])
        rows.append(dict(epsilon=float(e), error_mean=err_m, error_sd=err_sd,
                         coverage_mean=cov_m, coverage_sd=cov_sd, reps=reps))
    return sorted(rows, key=lambda r: r["epsilon"])


def sweep_rows_csv(rows: Sequence[dict], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r["epsilon"]] + [f"{r[c]:.6g}" for c in SWEEP_COLUMNS[1:-1]] + [r["reps"]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def plot_sweep(rows: Sequence[dict], path) -> None:
    """Two-panel SVG: mean error and sparsity coverage against epsilon."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dst2r"
    eps = [r["epsilon"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(eps, [r["error_mean"] for r in rows], marker="o")
    ax1.set_xscale("log")
    ax1.set_xlabel("epsilon")
    ax1.set_ylabel("mean estimation error")
    ax2.plot(eps, [r["coverage_mean"] for r in rows], marker="o", color="tab:orange")
    ax2.set_xscale("log")
    ax2.set_xlabel("epsilon")
    ax2.set_ylabel("sparsity coverage")
    ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def _cv_job(job):
    X, Y, cfg, train, test = job
    model, _ = fit(X[train], Y[train], cfg)
    pred = predict_batch(X[test], model)
    return float(np.mean(np.sum((Y[test] - pred).reshape(len(test), -1) ** 2, axis=1)))


def cross_validate(X: np.ndarray, Y: np.ndarray, config: SolverConfig,
                   alphas: Sequence[float], epsilons: Sequence[float],
                   folds: int = 5) -> Tuple[SolverConfig, List[dict]]:
    """Pick ``(alpha, epsilon)`` by mean held-out squared Frobenius prediction error.

    Samples are shuffled once with ``config.rng_seed`` and cut into
    ``folds`` contiguous blocks.  Ties go to the earlier grid point.
    """
    M = X.shape[0]
    if folds < 2 or folds > M:
        raise ValueError(f"need 2 <= folds <= {M}")
    if not alphas or not epsilons:
        raise ValueError("empty cross-validation grid")
    perm = np.random.default_rng(config.rng_seed).permutation(M)
    blocks = np.array_split(perm, folds)
    grid = [(float(a), float(e)) for a in alphas for e in epsilons]
    jobs = []
    for a, e in grid:
        cfg = replace(config, alpha=a, epsilon=e)
        for f in range(folds):
            test = np.sort(blocks[f])
            train = np.sort(np.concatenate([b for i, b in enumerate(blocks) if i != f]))
            jobs.append((X, Y, cfg, train, test))
    scores = _map(_cv_job, jobs)
    table = []
    for g, (a, e) in enumerate(grid):
        s = scores[g * folds:(g + 1) * folds]
        table.append(dict(alpha=a, epsilon=e, cv_error=float(np.mean(s))))
    best = min(range(len(table)), key=lambda i: (table[i]["cv_error"], i))
    chosen = replace(config, alpha=table[best]["alpha"], epsilon=table[best]["epsilon"])
    return chosen, table

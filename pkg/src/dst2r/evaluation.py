"""Recovery metrics and the vectorized sparse-OLS baseline.

Support metrics compare the zero patterns of matched true and fitted factor
vectors.  For mode ``j`` the rates pool counts over ranks::

    TPR_j = sum_r #{i : b_ji^r != 0, bhat_ji^r != 0} / sum_r #{i : b_ji^r != 0}
    FPR_j = sum_r #{i : b_ji^r == 0, bhat_ji^r != 0} / sum_r #{i : b_ji^r == 0}

Fitted components are matched to true ones greedily by the absolute cosine
between composed unit-rank tensors.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    Dst2rModel,
    UnitRankComponent,
    compose_component,
    effective_coefficients,
)
from .tensor import DimensionError

__all__ = [
    "ZERO_THRESHOLD",
    "EvalReport",
    "estimation_error",
    "match_components",
    "pad_rank",
    "tpr_fpr",
    "sparsity_coverage",
    "evaluate_model",
    "support_rates",
    "lasso_cd",
    "SparseOLS",
    "sparse_ols_fit",
    "aggregate",
    "BENCH_COLUMNS",
    "bench_rows_csv",
]

ZERO_THRESHOLD = 1e-8


@dataclass
class EvalReport:
    estimation_error: float
    relative_error: float
    tpr_per_mode: List[float] = field(default_factory=list)
    fpr_per_mode: List[float] = field(default_factory=list)
    tpr: float = math.nan  # mean over modes
    fpr: float = math.nan
    tpr_sum: float = math.nan  # sum over modes
    fpr_sum: float = math.nan
    coverage: float = math.nan
    runtime_seconds: float = 0.0


def _coef(model) -> np.ndarray:
    if isinstance(model, Dst2rModel):
        return np.asarray(effective_coefficients(model))
    return np.asarray(model, dtype=np.float64)


def estimation_error(true_model, fitted_model) -> float:
    """``||B_hat - B||_F`` on the raw predictor scale.

    Either argument may be a model or a dense coefficient array.
    """
    a, b = _coef(true_model), _coef(fitted_model)
    if a.shape != b.shape:
        raise DimensionError(f"coefficient shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def _effective_component(model: Dst2rModel, c: UnitRankComponent) -> np.ndarray:
    full = np.asarray(compose_component(c))
    s = model.standardization
    if s is not None:
        full = full / s.x_scale.reshape(s.x_scale.shape + (1,) * model.q)
    return full.ravel()


def match_components(true_model: Dst2rModel, fitted_model: Dst2rModel) -> List[Tuple[int, int]]:
    """Greedy one-to-one pairing ``(true_index, fitted_index)`` by |cosine|."""
    if true_model.rank != fitted_model.rank:
        raise ValueError(f"rank mismatch: true {true_model.rank}, fitted {fitted_model.rank}")
    T = [_effective_component(true_model, c) for c in true_model.components]
    F = [_effective_component(fitted_model, c) for c in fitted_model.components]
    sim = np.zeros((len(T), len(F)))
    for i, t in enumerate(T):
        for j, f in enumerate(F):
            den = np.linalg.norm(t) * np.linalg.norm(f)
            sim[i, j] = abs(t @ f) / den if den > 0 else 0.0
    pairs, used_t, used_f = [], set(), set()
    # Stable order: highest similarity first, ties by (true, fitted) index.
    order = sorted(((-sim[i, j], i, j) for i in range(len(T)) for j in range(len(F))))
    for _, i, j in order:
        if i in used_t or j in used_f:
            continue
        pairs.append((i, j))
        used_t.add(i)
        used_f.add(j)
    return sorted(pairs)


def pad_rank(model: Dst2rModel, rank: int) -> Dst2rModel:
    """Append all-zero components so ``model`` has ``rank`` components."""
    if model.rank > rank:
        raise ValueError(f"model rank {model.rank} exceeds {rank}")
    zero = UnitRankComponent(tuple(np.zeros(d) for d in model.predictor_shape),
                             tuple(np.zeros(d) for d in model.response_shape), 0.0, 0.0)
    comps = model.components + (zero,) * (rank - model.rank)
    return Dst2rModel(comps, model.predictor_shape, model.response_shape, model.standardization)


def _mode_counts(true_model, fitted_model, zero_threshold):
    n_modes = true_model.p + true_model.q
    tp = np.zeros(n_modes)
    fp = np.zeros(n_modes)
    pos = np.zeros(n_modes)
    neg = np.zeros(n_modes)
    for i, j in match_components(true_model, fitted_model):
        ct, cf = true_model.components[i], fitted_model.components[j]
        zero_comp = cf.w_p * cf.w_q == 0
        for k, (ft, ff) in enumerate(zip(ct.factors, cf.factors)):
            t_nz = np.abs(ft.beta) > zero_threshold
            f_nz = (np.abs(ff.beta) > zero_threshold) & (not zero_comp)
            tp[k] += np.count_nonzero(t_nz & f_nz)
            fp[k] += np.count_nonzero(~t_nz & f_nz)
            pos[k] += np.count_nonzero(t_nz)
            neg[k] += np.count_nonzero(~t_nz)
    return tp, fp, pos, neg


def tpr_fpr(true_model: Dst2rModel, fitted_model: Dst2rModel,
            zero_threshold: float = ZERO_THRESHOLD) -> Tuple[List[float], List[float]]:
    """Per-mode true and false positive rates.

    A mode without any true zero has FPR 0 (nothing can be falsely selected).
    """
    tp, fp, pos, neg = _mode_counts(true_model, fitted_model, zero_threshold)
    tpr = [float(a / b) if b else 1.0 for a, b in zip(tp, pos)]
    fpr = [float(a / b) if b else 0.0 for a, b in zip(fp, neg)]
    return tpr, fpr


def sparsity_coverage(true_model: Dst2rModel, fitted_model: Dst2rModel,
                      zero_threshold: float = ZERO_THRESHOLD) -> float:
    """Fraction of true-zero factor entries that are estimated as zero (1.0 if none)."""
    _, fp, _, neg = _mode_counts(true_model, fitted_model, zero_threshold)
    total = neg.sum()
    return float(1.0 - fp.sum() / total) if total else 1.0


def evaluate_model(true_model: Dst2rModel, fitted_model: Dst2rModel,
                   zero_threshold: float = ZERO_THRESHOLD, runtime: float = 0.0) -> EvalReport:
    """Full report; a fitted model of lower rank is padded with zero components."""
    fitted = pad_rank(fitted_model, true_model.rank)
    err = estimation_error(true_model, fitted)
    norm = float(np.linalg.norm(_coef(true_model).ravel()))
    tpr, fpr = tpr_fpr(true_model, fitted, zero_threshold)
    return EvalReport(
        estimation_error=err,
        relative_error=err / norm if norm > 0 else math.inf if err > 0 else 0.0,
        tpr_per_mode=tpr, fpr_per_mode=fpr,
        tpr=float(np.mean(tpr)), fpr=float(np.mean(fpr)),
        tpr_sum=float(np.sum(tpr)), fpr_sum=float(np.sum(fpr)),
        coverage=sparsity_coverage(true_model, fitted, zero_threshold),
        runtime_seconds=runtime)


def support_rates(true_coef: np.ndarray, coef: np.ndarray,
                  zero_threshold: float = ZERO_THRESHOLD) -> Tuple[float, float, float]:
    """Entrywise ``(tpr, fpr, coverage)`` for unstructured coefficient tensors."""
    t_nz = np.abs(true_coef) > zero_threshold
    f_nz = np.abs(coef) > zero_threshold
    pos, neg = np.count_nonzero(t_nz), np.count_nonzero(~t_nz)
    tpr = np.count_nonzero(t_nz & f_nz) / pos if pos else 1.0
    fpr = np.count_nonzero(~t_nz & f_nz) / neg if neg else 0.0
    return float(tpr), float(fpr), float(1.0 - fpr) if neg else 1.0


# ---------------------------------------------------------------------------
# Sparse OLS baseline
# ---------------------------------------------------------------------------

def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def lasso_cd(X: np.ndarray, Y: np.ndarray, lam: float, B0: Optional[np.ndarray] = None,
             tol: float = 1e-8, max_sweeps: int = 10000, history: Optional[list] = None):
    """Cyclic coordinate descent for every column of ``Y`` at once.

    Minimizes ``(1/2M) ||y - X b||^2 + lam ||b||_1`` per response column.
    Stops when no coefficient moves by more than ``tol`` in a sweep.  Pass a
    list as ``history`` to collect the summed objective after each sweep.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    M, P = X.shape
    B = np.zeros((P, Y.shape[1])) if B0 is None else np.array(B0, dtype=np.float64)
    R = Y - X @ B
    col_sq = np.einsum("mj,mj->j", X, X) / M
    for _ in range(max_sweeps):
        max_move = 0.0
        for j in range(P):
            if col_sq[j] == 0:
                continue
            old = B[j].copy()
            rho = X[:, j] @ R / M + col_sq[j] * old
            new = _soft(rho, lam) / col_sq[j]
            move = new - old
            if np.any(move):
                R -= np.outer(X[:, j], move)
                B[j] = new
                max_move = max(max_move, float(np.max(np.abs(move))))
        if history is not None:
            history.append(float(np.sum(R ** 2) / (2 * M) + lam * np.abs(B).sum()))
        if max_move <= tol:
            break
    return B


@dataclass
class SparseOLS:
    coef: np.ndarray  # raw-scale coefficients, shape predictor_dims + response_dims
    lam: float
    intercept: np.ndarray


def sparse_ols_fit(X, Y, lambda_grid: Optional[Sequence[float]] = None, n_lambda: int = 30,
                   val_fraction: float = 0.2, tol: float = 1e-8) -> SparseOLS:
    """Lasso on vectorized predictors and responses with lambda picked on a holdout.

    ``X`` is ``(M,) + predictor_dims`` and ``Y`` is ``(M,) + response_dims``.
    The last ``val_fraction`` of samples forms the validation split; the chosen
    lambda is then refit on all samples.  Without a grid, ``n_lambda``
    log-spaced values from ``lambda_max`` down to ``1e-4 * lambda_max`` are used.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    M = X.shape[0]
    if M < 2:
        raise ValueError("need at least two samples")
    pshape, qshape = X.shape[1:], Y.shape[1:]
    Xf = X.reshape(M, -1, order="F")
    Yf = Y.reshape(M, -1, order="F")
    mean, sd = Xf.mean(0), Xf.std(0)
    sd[sd == 0] = 1.0
    Xs = (Xf - mean) / sd
    ym = Yf.mean(0)
    Yc = Yf - ym

    if lambda_grid is None:
        lam_max = float(np.max(np.abs(Xs.T @ Yc))) / M
        lam_max = lam_max if lam_max > 0 else 1.0
        lambda_grid = lam_max * np.logspace(0, -4, n_lambda)
    grid = sorted((float(l) for l in lambda_grid), reverse=True)
    if not grid:
        raise ValueError("empty lambda grid")

    n_val = max(1, int(round(M * val_fraction)))
    n_tr = M - n_val
    if n_tr < 1:
        raise ValueError("validation split leaves no training samples")
    Xtr, Ytr, Xva, Yva = Xs[:n_tr], Yc[:n_tr], Xs[n_tr:], Yc[n_tr:]
    # Center the training block on its own means so the split is honest.
    xm, ymt = Xtr.mean(0), Ytr.mean(0)
    best, best_err, B = grid[0], math.inf, None
    for lam in grid:
        B = lasso_cd(Xtr - xm, Ytr - ymt, lam, B0=B, tol=tol)
        pred = (Xva - xm) @ B + ymt
        err = float(np.mean((Yva - pred) ** 2))
        if err < best_err - 1e-15:
            best, best_err = lam, err
    B = lasso_cd(Xs, Yc, best, tol=tol)
    coef = (B / sd[:, None]).reshape(pshape + qshape, order="F")
    intercept = (ym - (mean / sd) @ B).reshape(qshape, order="F")
    return SparseOLS(coef=coef, lam=best, intercept=intercept)


# ---------------------------------------------------------------------------
# Aggregation and CSV
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("rank", "sparsity", "method", "error_mean", "error_sd", "tpr", "fpr",
                 "tpr_sum", "fpr_sum", "coverage", "reps", "failed")


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample sd (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def bench_rows_csv(rows: Sequence[dict], path=None) -> str:
    """Write rows keyed by ``BENCH_COLUMNS``; rows are sorted by (rank, sparsity, method)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in sorted(rows, key=lambda r: (r["rank"], r["sparsity"], r["method"])):
        w.writerow([_fmt(r.get(c, "")) for c in BENCH_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text

"""Alternating stagewise search for sparse unit-rank tensor-on-tensor regression.

Working representation of the component under construction::

    B = mu * b_1 o ... o b_p o b_{p+1} o ... o b_{p+q},    ||b_l||_1 = 1

``mu`` is the l1 mass of ``B``.  When mode ``k`` is active its scaled factor
``beta_hat_k = mu * b_k`` carries the whole magnitude, so the ridge and lasso
terms of ``B`` become ``alpha * sigma_k * ||beta_hat_k||_2^2`` and
``lambda * ||beta_hat_k||_1`` with ``sigma_k = prod_{l != k} ||b_l||_2^2``.
The loss in ``beta_hat_k`` is then an ordinary (augmented) least-squares
problem and a coordinate move ``beta_hat_k[i] += delta`` changes it by exactly
``delta**2 * H_i - 2 * delta * g_i``.

Each stage (contract over the predictor modes, generate over the response
modes) first tries the best backward move and keeps it if it lowers the
penalized objective by more than ``gamma``; otherwise it takes the best
forward move and updates ``lambda`` with
``min(lambda, (L_old - L_new - gamma) / (Omega_new - Omega_old))``.

Per iteration the Z-caches cost
O(M * sum_{k != k*} (prod_{i != k, k*} d_i + prod d_Q)) when updated
incrementally instead of rebuilt.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    Dst2rModel,
    Standardization,
    UnitRankComponent,
    canonicalize_signs,
)
from .tensor import DimensionError

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "SolverState",
    "TraceRecord",
    "FitTrace",
    "Step",
    "ContractDesign",
    "GenerateDesign",
    "stack_samples",
    "initialize",
    "build_design_contract",
    "build_design_generate",
    "select_step",
    "objective",
    "start_rank",
    "contract_step",
    "generate_step",
    "run_rank",
    "fit",
]

CONTRACT = "contract"
GENERATE = "generate"
FORWARD = "forward"
BACKWARD = "backward"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    """Solver settings.

    ``rng_seed`` only drives fold shuffling in cross-validation; the solver
    itself is deterministic.  ``refit_passes`` > 0 adds backfitting sweeps
    after greedy deflation: each rank is refit from scratch against the
    responses minus every other rank's current fit.
    """

    epsilon: float = 0.01
    gamma: float = 1e-6
    alpha: float = 0.1
    max_rank: int = 1
    max_iters_per_rank: int = 20000
    lambda_floor: float = 0.0
    rng_seed: int = 0
    incremental_z: bool = False
    refit_passes: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if int(self.max_rank) < 1:
            raise ValueError("max_rank must be >= 1")
        if int(self.max_iters_per_rank) < 1:
            raise ValueError("max_iters_per_rank must be >= 1")
        if not self.lambda_floor >= 0:
            raise ValueError("lambda_floor must be >= 0")
        if int(self.refit_passes) < 0:
            raise ValueError("refit_passes must be >= 0")
        self.refit_passes = int(self.refit_passes)
        self.max_rank = int(self.max_rank)
        self.max_iters_per_rank = int(self.max_iters_per_rank)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SolverConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    rank: int
    lambda_t: float
    objective: float
    loss: float
    penalty: float
    stage: str
    direction: str
    mode: int = -1
    index: int = -1
    step: float = 0.0
    sweep: int = 0


TRACE_COLUMNS = ("sweep", "rank", "iteration", "lambda", "J", "L", "R", "stage", "direction",
                 "k", "i_k", "s")


@dataclass
class FitTrace:
    records: List[TraceRecord] = field(default_factory=list)
    lambda0: List[float] = field(default_factory=list)
    final_residual: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.records)

    def for_rank(self, rank: int, sweep: int = 0) -> List[TraceRecord]:
        return [r for r in self.records if r.rank == rank and r.sweep == sweep]

    def lambdas(self, rank: int, sweep: int = 0) -> np.ndarray:
        return np.array([r.lambda_t for r in self.for_rank(rank, sweep)])

    def segments(self) -> List[List[TraceRecord]]:
        """Records split into one path per (sweep, rank), in run order."""
        out, key = [], None
        for r in self.records:
            if (r.sweep, r.rank) != key:
                out.append([])
                key = (r.sweep, r.rank)
            out[-1].append(r)
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([r.sweep, r.rank, r.iteration, repr(r.lambda_t), repr(r.objective), repr(r.loss),
                        repr(r.penalty), r.stage, r.direction, r.mode, r.index, repr(r.step)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


# ---------------------------------------------------------------------------
# Input handling
# ---------------------------------------------------------------------------

def stack_samples(tensors, name: str = "samples") -> np.ndarray:
    """Stack a list of same-shape tensors (or pass through an ndarray) to ``(M, ...)``."""
    if isinstance(tensors, np.ndarray):
        arr = np.asarray(tensors, dtype=np.float64)
        if arr.ndim < 2 or arr.shape[0] < 1:
            raise ValueError(f"{name}: need a stacked array of shape (M, ...)")
        return arr
    tensors = list(tensors)
    if not tensors:
        raise ValueError(f"{name}: empty dataset")
    arrays = [np.asarray(t, dtype=np.float64) for t in tensors]
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise DimensionError(f"{name}[{i}] has shape {a.shape}, expected {shape}")
    return np.stack(arrays)


def _check_pair(X: np.ndarray, Y: np.ndarray) -> None:
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"{X.shape[0]} predictors but {Y.shape[0]} responses")


def _flat(a: np.ndarray) -> np.ndarray:
    """(M, d1, ..., dn) -> (M, prod d) with canonical order inside each sample."""
    return a.reshape(a.shape[0], -1, order="F")


def _outer_all(vectors) -> np.ndarray:
    out = np.asarray(vectors[0])
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def _unit(v: np.ndarray) -> Tuple[np.ndarray, float]:
    n = float(np.abs(v).sum())
    return (v / n if n > 0 else v.copy()), n


def _contract_modes(X: np.ndarray, betas: Sequence[np.ndarray], keep: Sequence[int]) -> np.ndarray:
    """Contract predictor modes of stacked ``X`` with ``betas`` except those in ``keep``."""
    out = X
    for l in range(len(betas) - 1, -1, -1):
        if l in keep:
            continue
        out = np.tensordot(out, betas[l], axes=([1 + l], [0]))
    return out


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------

class _Design:
    stage: str
    mode: int
    beta_hat: np.ndarray
    sigma: float
    alpha: float

    @property
    def ridge(self) -> float:
        return self.alpha * self.sigma

    @property
    def hess(self) -> np.ndarray:
        """(1/M) sum_m Diag(Zhat_m Zhat_m^T)."""
        raise NotImplementedError

    @property
    def grad(self) -> np.ndarray:
        """(1/M) sum_m Zhat_m ehat_m."""
        raise NotImplementedError

    def delta_loss(self, index: int, delta: float) -> float:
        return float(delta * delta * self.hess[index] - 2.0 * delta * self.grad[index])


@dataclass(eq=False)
class ContractDesign(_Design):
    """Design for a contraction mode ``k``.

    ``U[m] = X_m x_{l != k} b_l`` and ``b = vec(b_{p+1} o ... o b_{p+q})``, so
    that ``Z_m = U[m] b^T`` (``d_k x prod d_Q``) and ``vec(Yhat_m) = Z_m^T beta_hat``.
    """

    mode: int
    U: np.ndarray
    b: np.ndarray
    targets: np.ndarray
    beta_hat: np.ndarray
    sigma: float
    alpha: float
    stage: str = CONTRACT

    @property
    def Z(self) -> np.ndarray:
        return self.U[:, :, None] * self.b[None, None, :]

    def Zhat(self, m: int) -> np.ndarray:
        d = self.beta_hat.size
        return np.hstack([np.outer(self.U[m], self.b), math.sqrt(self.ridge) * np.eye(d)])

    def yhat(self, m: int) -> np.ndarray:
        return np.concatenate([self.targets[m], np.zeros(self.beta_hat.size)])

    def ehat(self, m: int) -> np.ndarray:
        return self.yhat(m) - self.Zhat(m).T @ self.beta_hat

    @cached_property
    def hess(self) -> np.ndarray:
        return float(self.b @ self.b) * np.mean(self.U ** 2, axis=0) + self.ridge

    @cached_property
    def grad(self) -> np.ndarray:
        fitted = (self.U @ self.beta_hat)[:, None] * self.b[None, :]
        r = (self.targets - fitted) @ self.b
        return self.U.T @ r / self.U.shape[0] - self.ridge * self.beta_hat


@dataclass(eq=False)
class GenerateDesign(_Design):
    """Design for a generation mode ``k``.

    ``a[m] = z_m * vec(o_{l in Q, l != k} b_l)`` with ``z_m = <X_m, b_1 o ... o b_p>``;
    row ``i`` of the mode-``k`` matricized response is modelled as
    ``beta_hat[i] * a[m]``.
    """

    mode: int
    a: np.ndarray
    targets: np.ndarray
    beta_hat: np.ndarray
    sigma: float
    alpha: float
    stage: str = GENERATE

    @property
    def Z(self) -> np.ndarray:
        return self.a

    def Zhat(self, m: int) -> np.ndarray:
        return np.append(self.a[m], math.sqrt(self.ridge))

    def yhat(self, m: int) -> np.ndarray:
        return np.hstack([self.targets[m], np.zeros((self.beta_hat.size, 1))])

    def ehat(self, m: int) -> np.ndarray:
        return self.yhat(m) - np.outer(self.beta_hat, self.Zhat(m))

    @cached_property
    def hess(self) -> np.ndarray:
        h = float(np.mean(np.sum(self.a ** 2, axis=1))) + self.ridge
        return np.full(self.beta_hat.size, h)

    @cached_property
    def grad(self) -> np.ndarray:
        M = self.a.shape[0]
        cross = np.einsum("mij,mj->i", self.targets, self.a) / M
        return cross - self.hess * self.beta_hat


def _sigma(betas: Sequence[np.ndarray], k: int) -> float:
    return float(np.prod([b @ b for l, b in enumerate(betas) if l != k]))


def _unpack_component(c: UnitRankComponent) -> Tuple[List[np.ndarray], float]:
    betas, mu = [], c.w_p * c.w_q
    for f in c.factors:
        unit, n = _unit(np.array(f.beta))
        betas.append(unit)
        mu *= n
    return betas, mu


def _contract_design(X, betas, p, mu, k, targets_flat, alpha, U=None) -> ContractDesign:
    if U is None:
        U = _contract_modes(X, betas[:p], keep=(k,))
    b = _outer_all(betas[p:]).ravel(order="F")
    return ContractDesign(mode=k, U=U, b=b, targets=targets_flat, beta_hat=mu * betas[k],
                          sigma=_sigma(betas, k), alpha=alpha)


def _generate_design(z, betas, p, mu, k, residual, alpha) -> GenerateDesign:
    j = k - p
    gen = betas[p:]
    rest = [g for l, g in enumerate(gen) if l != j]
    c = _outer_all(rest).ravel(order="F") if rest else np.ones(1)
    M = residual.shape[0]
    targets = np.moveaxis(residual, 1 + j, 1).reshape(M, gen[j].size, -1, order="F")
    return GenerateDesign(mode=k, a=np.multiply.outer(z, c), targets=targets,
                          beta_hat=mu * betas[k], sigma=_sigma(betas, k), alpha=alpha)


def build_design_contract(xs, component: UnitRankComponent, k: int, ys,
                          alpha: float = 0.0) -> ContractDesign:
    """Design of the contraction subproblem in mode ``k`` (0-based, ``k < p``).

    ``ys`` are the current targets (residuals) of the rank being fitted.
    """
    X = stack_samples(xs, "xs")
    Y = stack_samples(ys, "ys")
    _check_pair(X, Y)
    p = component.p
    if not 0 <= k < p:
        raise IndexError(f"contraction mode {k} out of range 0..{p - 1}")
    betas, mu = _unpack_component(component)
    return _contract_design(X, betas, p, mu, k, _flat(Y), alpha)


def build_design_generate(xs, component: UnitRankComponent, k: int, ys,
                          alpha: float = 0.0) -> GenerateDesign:
    """Design of the generation subproblem in mode ``k`` (``p <= k < p + q``)."""
    X = stack_samples(xs, "xs")
    Y = stack_samples(ys, "ys")
    _check_pair(X, Y)
    p, q = component.p, component.q
    if not p <= k < p + q:
        raise IndexError(f"generation mode {k} out of range {p}..{p + q - 1}")
    betas, mu = _unpack_component(component)
    z = _contract_modes(X, betas[:p], keep=())
    return _generate_design(z, betas, p, mu, k, Y, alpha)


# ---------------------------------------------------------------------------
# Step selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    stage: str
    direction: str
    mode: int
    index: int
    delta: float
    d_loss: float
    d_penalty: float

    def d_objective(self, lam: float) -> float:
        return self.d_loss + lam * self.d_penalty


def _candidates(d: _Design, epsilon: float, direction: str):
    bh = d.beta_hat
    nz = bh != 0
    if direction == FORWARD:
        sign = np.where(nz, np.sign(bh), np.where(d.grad >= 0, 1.0, -1.0))
        delta = sign * epsilon
        d_pen = np.full(bh.size, float(epsilon))
        admissible = np.ones(bh.size, dtype=bool)
    else:
        # Shrink toward zero without crossing it; never empty a factor.
        delta = -np.sign(bh) * np.minimum(epsilon, np.abs(bh))
        d_pen = -np.abs(delta)
        admissible = nz.copy()
        if np.count_nonzero(nz) == 1:
            admissible &= np.abs(bh) > epsilon
    d_loss = delta * delta * d.hess - 2.0 * delta * d.grad
    return delta, d_loss, d_pen, admissible


def select_step(designs: Sequence[_Design], epsilon: float, direction: str,
                lam: float = 0.0) -> Optional[Step]:
    """Best single-coordinate move over all modes of a stage.

    Minimizes ``dL + lam * dOmega``; for forward moves ``dOmega = epsilon``
    for every candidate, so this is the plain loss criterion.  Ties go to the
    lowest mode, then the lowest coordinate.  Returns ``None`` when no
    backward candidate exists.
    """
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"unknown direction {direction!r}")
    best, best_val = None, math.inf
    for d in sorted(designs, key=lambda d: d.mode):
        delta, d_loss, d_pen, ok = _candidates(d, epsilon, direction)
        if not ok.any():
            continue
        crit = np.where(ok, d_loss + lam * d_pen, np.inf)
        i = int(np.argmin(crit))
        if crit[i] < best_val:
            best_val = crit[i]
            best = Step(d.stage, direction, d.mode, i, float(delta[i]), float(d_loss[i]),
                        float(d_pen[i]))
    return best


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _loss_terms(X, residual, betas, p, mu, alpha) -> Tuple[float, float]:
    z = _contract_modes(X, betas[:p], keep=())
    fitted = mu * np.multiply.outer(z, _outer_all(betas[p:]))
    err = residual - fitted
    fro2 = mu * mu * float(np.prod([b @ b for b in betas]))
    loss = float(np.mean(np.sum(_flat(err) ** 2, axis=1))) + alpha * fro2
    pen = mu * float(np.prod([np.abs(b).sum() for b in betas]))
    return loss, pen


def objective(component: UnitRankComponent, xs, ys, alpha: float,
              lam: float) -> Tuple[float, float, float]:
    """Return ``(J, L, R)`` with

    ``L = (1/M) sum_m ||Y_m - <X_m, B_P> B_Q||_F^2 + alpha ||B||_F^2``,
    ``R = ||B||_1`` and ``J = L + lam * R`` for the unit-rank ``B``.
    """
    X = stack_samples(xs, "xs")
    Y = stack_samples(ys, "ys")
    _check_pair(X, Y)
    betas, mu = _unpack_component(component)
    loss, pen = _loss_terms(X, Y, betas, component.p, mu, alpha)
    return loss + lam * pen, loss, pen


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _initial_factors(X: np.ndarray, Y: np.ndarray):
    M = X.shape[0]
    C = _flat(X).T @ _flat(Y) / M
    flat_idx = int(np.argmax(np.abs(C)))
    Ii, Ij = np.unravel_index(flat_idx, C.shape)
    lam0 = float(abs(C[Ii, Ij]))
    sign = 1.0 if C[Ii, Ij] >= 0 else -1.0
    idx = (np.unravel_index(Ii, X.shape[1:], order="F")
           + np.unravel_index(Ij, Y.shape[1:], order="F"))
    dims = X.shape[1:] + Y.shape[1:]
    betas = []
    for d, i in zip(dims, idx):
        e = np.zeros(d)
        e[int(i)] = 1.0
        betas.append(e)
    # The sign rides on one factor so that B_0 = eps * sign * e o ... o e.
    betas[0] *= sign
    return lam0, betas


def initialize(xs, ys, epsilon: float = 0.01) -> Tuple[float, UnitRankComponent]:
    """Starting ``lambda_0 = max |X^T Y| / M`` and the one-step component.

    ``X`` and ``Y`` are the sample-by-feature matricizations of the stacked
    data, which should already be centered.  The component is
    ``epsilon * sign * e_{i_1} o ... o e_{i_{p+q}}`` at the argmax entry; with
    ``lambda_0 == 0`` its magnitude is zero.
    """
    X = stack_samples(xs, "xs")
    Y = stack_samples(ys, "ys")
    _check_pair(X, Y)
    lam0, betas = _initial_factors(X, Y)
    p = X.ndim - 1
    w = math.sqrt(epsilon) if lam0 > 0 else 0.0
    return lam0, UnitRankComponent(tuple(betas[:p]), tuple(betas[p:]), w, w)


# ---------------------------------------------------------------------------
# State and steps
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SolverState:
    """Mutable working state for one rank.  Owned by a single fit."""

    X: np.ndarray
    residual: np.ndarray
    betas: List[np.ndarray]
    mu_t: float
    lambda_t: float
    w_p: float
    w_q: float
    rank: int = 0
    sweep: int = 0
    iteration: int = 0
    trace: FitTrace = field(default_factory=FitTrace)
    loss_t: float = math.nan
    last_step: Optional[Step] = None
    degenerate: bool = False
    u_cache: Optional[List[np.ndarray]] = None
    callback: Optional[Callable[["SolverState"], None]] = None

    @property
    def p(self) -> int:
        return self.X.ndim - 1

    @property
    def q(self) -> int:
        return self.residual.ndim - 1

    def contraction_u(self, k: int) -> np.ndarray:
        if self.u_cache is not None:
            return self.u_cache[k]
        return _contract_modes(self.X, self.betas[:self.p], keep=(k,))

    def z(self) -> np.ndarray:
        if self.u_cache is not None:
            return self.u_cache[0] @ self.betas[0]
        return _contract_modes(self.X, self.betas[:self.p], keep=())

    def fitted(self) -> np.ndarray:
        return self.mu_t * np.multiply.outer(self.z(), _outer_all(self.betas[self.p:]))

    def beta_hat(self, k: int) -> np.ndarray:
        return self.mu_t * self.betas[k]

    def loss_and_penalty(self, alpha: float) -> Tuple[float, float]:
        return _loss_terms(self.X, self.residual, self.betas, self.p, self.mu_t, alpha)

    def component(self) -> UnitRankComponent:
        p = self.p
        w_q = self.mu_t / self.w_p if self.w_p > 0 else 0.0
        c = UnitRankComponent(tuple(self.betas[:p]), tuple(self.betas[p:]), self.w_p, w_q)
        return canonicalize_signs(c)


def _record(state: SolverState, config: SolverConfig, stage: str, direction: str,
            step: Optional[Step] = None) -> None:
    # The loss is carried forward with the exact per-step change, not re-evaluated.
    loss, pen = state.loss_t, state.mu_t
    state.trace.records.append(TraceRecord(
        iteration=state.iteration, rank=state.rank, lambda_t=state.lambda_t,
        objective=loss + state.lambda_t * pen, loss=loss, penalty=pen,
        stage=stage, direction=direction,
        mode=step.mode if step else -1, index=step.index if step else -1,
        step=step.delta if step else 0.0, sweep=state.sweep))
    if state.callback is not None:
        state.callback(state)


def start_rank(X: np.ndarray, residual: np.ndarray, config: SolverConfig, rank: int = 0,
               trace: Optional[FitTrace] = None, sweep: int = 0,
               callback: Optional[Callable[[SolverState], None]] = None) -> SolverState:
    """Initialize the working state of one rank on the current residual.

    ``callback(state)`` runs after every trace record, including this one.
    """
    lam0, betas = _initial_factors(X, residual)
    mu = config.epsilon if lam0 > 0 else 0.0
    w = math.sqrt(mu)
    state = SolverState(X=X, residual=residual, betas=betas, mu_t=mu, lambda_t=lam0,
                        w_p=w, w_q=w, rank=rank, sweep=sweep,
                        trace=trace if trace is not None else FitTrace(), callback=callback)
    if config.incremental_z:
        state.u_cache = [_contract_modes(X, betas[:state.p], keep=(k,)) for k in range(state.p)]
    state.loss_t, _ = state.loss_and_penalty(config.alpha)
    state.trace.lambda0.append(lam0)
    _record(state, config, "init", "init")
    return state


def _designs(state: SolverState, config: SolverConfig, stage: str) -> List[_Design]:
    p, q = state.p, state.q
    if stage == CONTRACT:
        targets = _flat(state.residual)
        return [_contract_design(state.X, state.betas, p, state.mu_t, k, targets, config.alpha,
                                 U=state.contraction_u(k)) for k in range(p)]
    z = state.z()
    return [_generate_design(z, state.betas, p, state.mu_t, k, state.residual, config.alpha)
            for k in range(p, p + q)]


def _apply(state: SolverState, step: Step) -> None:
    k, i = step.mode, step.index
    bh = state.beta_hat(k)
    bh[i] += step.delta
    if step.direction == BACKWARD and abs(bh[i]) < 1e-300:
        bh[i] = 0.0
    new_unit, mu_new = _unit(bh)
    mu_old = state.mu_t
    if state.u_cache is not None and step.stage == CONTRACT:
        p = state.p
        for kk in range(p):
            if kk == k:
                continue
            sl = np.take(state.X, i, axis=1 + k)
            # remaining predictor modes after dropping k, with kk kept
            rest = [l for l in range(p) if l != k]
            rest_betas = [state.betas[l] for l in rest]
            S = _contract_modes(sl, rest_betas, keep=(rest.index(kk),))
            state.u_cache[kk] = (mu_old * state.u_cache[kk] + step.delta * S) / mu_new
    state.betas[k] = new_unit
    state.mu_t = mu_new
    state.loss_t += step.d_loss
    ratio = mu_new / mu_old
    if step.stage == CONTRACT:
        state.w_p *= ratio
    else:
        state.w_q *= ratio


def _stage_step(state: SolverState, config: SolverConfig, stage: str) -> SolverState:
    state.last_step = None
    if stage == GENERATE and not np.any(state.z()):
        state.degenerate = True
        logger.info("rank %d: contraction part is orthogonal to every sample; abandoning",
                    state.rank)
        return state
    designs = _designs(state, config, stage)
    lam, eps = state.lambda_t, config.epsilon

    back = select_step(designs, eps, BACKWARD, lam)
    if back is not None and back.d_objective(lam) < -config.gamma:
        _apply(state, back)
        state.last_step = back
        _record(state, config, stage, BACKWARD, back)
        return state

    fwd = select_step(designs, eps, FORWARD, lam)
    if fwd is None:
        return state
    bh = state.beta_hat(fwd.mode)
    d_omega = abs(bh[fwd.index] + fwd.delta) - abs(bh[fwd.index])
    if not math.isclose(d_omega, eps, rel_tol=1e-9, abs_tol=1e-12):
        raise AssertionError(f"forward step changed the l1 mass by {d_omega}, expected {eps}")
    if d_omega <= 0:
        logger.warning("forward step without l1 growth; lambda left unchanged")
        new_lam = lam
    else:
        new_lam = min(lam, (-fwd.d_loss - config.gamma) / d_omega)
    if new_lam < config.lambda_floor:
        # The path ends here; the move is not taken.
        return state
    _apply(state, fwd)
    state.lambda_t = new_lam
    state.last_step = fwd
    _record(state, config, stage, FORWARD, fwd)
    return state


def contract_step(state: SolverState, config: SolverConfig) -> SolverState:
    """One backward-or-forward move over the contraction (predictor) modes."""
    return _stage_step(state, config, CONTRACT)


def generate_step(state: SolverState, config: SolverConfig) -> SolverState:
    """One backward-or-forward move over the generation (response) modes."""
    return _stage_step(state, config, GENERATE)


def run_rank(state: SolverState, config: SolverConfig) -> SolverState:
    """Alternate contract and generate moves until the path for this rank ends.

    When neither stage can move any more the path has run down to
    ``lambda_floor``; a final ``stop`` record at that level closes it.
    """
    floor = config.lambda_floor
    stalled = False
    while state.lambda_t > floor and state.iteration < config.max_iters_per_rank:
        state.iteration += 1
        contract_step(state, config)
        moved = state.last_step is not None
        if state.lambda_t <= floor:
            break
        generate_step(state, config)
        if state.degenerate:
            break
        if not (moved or state.last_step is not None):
            stalled = True
            break
    if stalled and state.lambda_t > floor:
        state.lambda_t = floor
        _record(state, config, "stop", "stop")
    return state


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------

def _standardize(X: np.ndarray, Y: np.ndarray):
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    y_mean = Y.mean(axis=0)
    return (X - x_mean) / x_scale, Y - y_mean, Standardization(x_mean, x_scale, y_mean)


def fit(xs, ys, config: Optional[SolverConfig] = None,
        callback: Optional[Callable[[SolverState], None]] = None) -> Tuple[Dst2rModel, FitTrace]:
    """Fit a rank-``config.max_rank`` model by greedy deflation.

    Responses are centered and predictors standardized entrywise across
    samples before fitting; the returned model carries those maps so that it
    predicts on raw inputs.  With ``config.refit_passes`` > 0 the ranks are
    then backfitted in order.  ``callback(state)`` is invoked after every
    trace record with the live working state (read it, do not mutate it).
    """
    config = config or SolverConfig()
    X = stack_samples(xs, "xs")
    Y = stack_samples(ys, "ys")
    _check_pair(X, Y)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("inputs contain non-finite values")
    Xs, residual, std = _standardize(X, Y)
    trace = FitTrace()
    components, fits = [], []
    for r in range(config.max_rank):
        state = start_rank(Xs, residual, config, rank=r, trace=trace, callback=callback)
        if state.lambda_t <= config.lambda_floor:
            break
        run_rank(state, config)
        if state.degenerate:
            break
        components.append(state.component())
        fits.append(state.fitted())
        residual = residual - fits[-1]

    for sweep in range(1, config.refit_passes + 1):
        for r in range(len(components)):
            target = residual + fits[r]
            state = start_rank(Xs, target, config, rank=r, trace=trace, sweep=sweep,
                               callback=callback)
            if state.lambda_t <= config.lambda_floor:
                continue
            run_rank(state, config)
            if state.degenerate:
                continue
            components[r] = state.component()
            fits[r] = state.fitted()
            residual = target - fits[r]

    trace.final_residual = residual
    model = Dst2rModel(tuple(components), X.shape[1:], Y.shape[1:], std)
    return model, trace

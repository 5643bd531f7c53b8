"""CP-structured coefficient tensors split into contraction and generation parts.

A unit-rank component is

    B_r = (w_p * b_1 o ... o b_p) o (w_q * b_{p+1} o ... o b_{p+q})

where the first ``p`` factors live on the predictor modes and the last ``q``
on the response modes.  Prediction never materializes ``B_r``: the predictor
is first contracted to a scalar against the contraction part, and that scalar
then scales the generation part.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import DenseTensor, DimensionError

__all__ = [
    "RankOneFactor",
    "UnitRankComponent",
    "Standardization",
    "Dst2rModel",
    "compose_part",
    "compose_full",
    "compose_component",
    "effective_coefficients",
    "predict_unit_rank",
    "predict",
    "predict_batch",
    "canonicalize_signs",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

NORMALIZATION_TOL = 1e-9


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).ravel()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RankOneFactor:
    """One mode's direction vector."""

    beta: np.ndarray

    def __post_init__(self):
        beta = _frozen(self.beta)
        if beta.size < 1:
            raise DimensionError("a factor needs at least one entry")
        object.__setattr__(self, "beta", beta)

    @property
    def mode_extent(self) -> int:
        return self.beta.size

    @property
    def is_normalized(self) -> bool:
        return abs(np.abs(self.beta).sum() - 1.0) <= NORMALIZATION_TOL

    def __eq__(self, other):
        if not isinstance(other, RankOneFactor):
            return NotImplemented
        return np.array_equal(self.beta, other.beta)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class UnitRankComponent:
    contraction_factors: tuple
    generation_factors: tuple
    w_p: float = 1.0
    w_q: float = 1.0

    def __post_init__(self):
        cf = tuple(f if isinstance(f, RankOneFactor) else RankOneFactor(f)
                   for f in self.contraction_factors)
        gf = tuple(f if isinstance(f, RankOneFactor) else RankOneFactor(f)
                   for f in self.generation_factors)
        if not cf or not gf:
            raise ValueError("a component needs at least one contraction and one generation factor")
        if self.w_p < 0 or self.w_q < 0:
            raise ValueError(f"magnitudes must be nonnegative, got w_p={self.w_p}, w_q={self.w_q}")
        object.__setattr__(self, "contraction_factors", cf)
        object.__setattr__(self, "generation_factors", gf)
        object.__setattr__(self, "w_p", float(self.w_p))
        object.__setattr__(self, "w_q", float(self.w_q))

    @property
    def p(self) -> int:
        return len(self.contraction_factors)

    @property
    def q(self) -> int:
        return len(self.generation_factors)

    @property
    def factors(self) -> tuple:
        return self.contraction_factors + self.generation_factors

    @property
    def predictor_shape(self) -> tuple:
        return tuple(f.mode_extent for f in self.contraction_factors)

    @property
    def response_shape(self) -> tuple:
        return tuple(f.mode_extent for f in self.generation_factors)

    def __eq__(self, other):
        if not isinstance(other, UnitRankComponent):
            return NotImplemented
        return (self.factors == other.factors and self.w_p == other.w_p
                and self.w_q == other.w_q)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Standardization:
    """Affine maps applied around the CP model at prediction time.

    ``predict(x) = <<(x - x_mean) / x_scale, B>> + y_mean``
    """

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray

    def __post_init__(self):
        for name in ("x_mean", "x_scale", "y_mean"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.x_mean.shape != self.x_scale.shape:
            raise DimensionError("x_mean and x_scale shapes differ")
        if np.any(self.x_scale <= 0):
            raise ValueError("x_scale entries must be positive")


@dataclass(frozen=True, eq=False)
class Dst2rModel:
    components: tuple
    predictor_shape: tuple
    response_shape: tuple
    standardization: Optional[Standardization] = None

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "predictor_shape", tuple(int(d) for d in self.predictor_shape))
        object.__setattr__(self, "response_shape", tuple(int(d) for d in self.response_shape))
        for c in self.components:
            if c.predictor_shape != self.predictor_shape or c.response_shape != self.response_shape:
                raise DimensionError(
                    f"component extents {c.predictor_shape}->{c.response_shape} do not match "
                    f"model {self.predictor_shape}->{self.response_shape}")
        s = self.standardization
        if s is not None:
            if s.x_mean.shape != self.predictor_shape or s.y_mean.shape != self.response_shape:
                raise DimensionError("standardization shapes do not match the model")

    @property
    def rank(self) -> int:
        return len(self.components)

    @property
    def p(self) -> int:
        return len(self.predictor_shape)

    @property
    def q(self) -> int:
        return len(self.response_shape)

    def __eq__(self, other):
        if not isinstance(other, Dst2rModel):
            return NotImplemented
        if (self.components != other.components or self.predictor_shape != other.predictor_shape
                or self.response_shape != other.response_shape):
            return False
        a, b = self.standardization, other.standardization
        if a is None or b is None:
            return a is b
        return all(np.array_equal(getattr(a, n), getattr(b, n))
                   for n in ("x_mean", "x_scale", "y_mean"))

    __hash__ = None


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _outer_all(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = np.asarray(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def _betas(factors) -> list:
    return [f.beta if isinstance(f, RankOneFactor) else np.asarray(f, dtype=np.float64)
            for f in factors]


def compose_part(factors: Sequence, w: float = 1.0) -> DenseTensor:
    """``w * b_1 o b_2 o ... o b_k`` as a dense tensor."""
    if len(factors) == 0:
        raise ValueError("compose_part needs at least one factor")
    return DenseTensor(float(w) * _outer_all(_betas(factors)))


def compose_component(c: UnitRankComponent) -> DenseTensor:
    return compose_part(c.factors, c.w_p * c.w_q)


def compose_full(model: Dst2rModel) -> DenseTensor:
    """Sum of the composed unit-rank components, in model coordinates."""
    full = np.zeros(model.predictor_shape + model.response_shape)
    for c in model.components:
        full += np.asarray(compose_component(c))
    return DenseTensor(full)


def effective_coefficients(model: Dst2rModel) -> DenseTensor:
    """Coefficient tensor acting on raw (unstandardized) predictors."""
    full = np.asarray(compose_full(model))
    s = model.standardization
    if s is None:
        return DenseTensor(full)
    extra = (1,) * model.q
    return DenseTensor(full / s.x_scale.reshape(s.x_scale.shape + extra))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _contract_scalar(x: np.ndarray, betas: Sequence[np.ndarray]) -> np.ndarray:
    """x x_1 b_1 ... x_p b_p over the trailing ``p`` modes of ``x``."""
    out = x
    for b in reversed(betas):
        out = out @ b
    return out


def predict_unit_rank(x, c: UnitRankComponent) -> DenseTensor:
    """``<x, B_P> * B_Q`` for one component, without forming the full tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != c.predictor_shape:
        raise DimensionError(f"predictor shape {x.shape} != component shape {c.predictor_shape}")
    z = c.w_p * float(_contract_scalar(x, _betas(c.contraction_factors)))
    return DenseTensor(z * np.asarray(compose_part(c.generation_factors, c.w_q)))


def predict_batch(xs: np.ndarray, model: Dst2rModel, standardize: bool = True) -> np.ndarray:
    """Vectorized prediction for stacked predictors of shape ``(M,) + predictor_shape``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[1:] != model.predictor_shape:
        raise DimensionError(f"predictor shape {xs.shape[1:]} != model shape {model.predictor_shape}")
    s = model.standardization if standardize else None
    if s is not None:
        xs = (xs - s.x_mean) / s.x_scale
    out = np.zeros((xs.shape[0],) + model.response_shape)
    for c in model.components:
        z = c.w_p * _contract_scalar(xs, _betas(c.contraction_factors))
        gen = np.asarray(compose_part(c.generation_factors, c.w_q))
        out += np.multiply.outer(z, gen)
    if s is not None:
        out += s.y_mean
    return out


def predict(x, model: Dst2rModel):
    """Predict one response tensor, or a list of them for a list of inputs."""
    if isinstance(x, (list, tuple)):
        if not x:
            return []
        stacked = np.stack([np.asarray(xi, dtype=np.float64) for xi in x])
        return [DenseTensor(y) for y in predict_batch(stacked, model)]
    return DenseTensor(predict_batch(np.asarray(x, dtype=np.float64)[None], model)[0])


def canonicalize_signs(c: UnitRankComponent) -> UnitRankComponent:
    """Flip factor signs so each factor's largest-magnitude entry is positive.

    The composed tensor is preserved: when an odd number of flips is needed
    the first contraction factor keeps the leftover sign.
    """
    betas = [np.array(f.beta) for f in c.factors]
    flips = 0
    for b in betas:
        if b.size and b[np.argmax(np.abs(b))] < 0:
            b *= -1.0
            flips += 1
    if flips % 2:
        betas[0] *= -1.0
    return UnitRankComponent(tuple(betas[:c.p]), tuple(betas[c.p:]), c.w_p, c.w_q)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

MODEL_FORMAT = "dst2r-model"


def _vec_list(a: np.ndarray) -> list:
    return [float(v) for v in np.asarray(a).ravel(order="F")]


def model_to_dict(model: Dst2rModel) -> dict:
    out = {
        "format": MODEL_FORMAT,
        "version": 1,
        "predictor_shape": list(model.predictor_shape),
        "response_shape": list(model.response_shape),
        "rank": model.rank,
        "components": [
            {
                "w_p": c.w_p,
                "w_q": c.w_q,
                "contraction": [_vec_list(f.beta) for f in c.contraction_factors],
                "generation": [_vec_list(f.beta) for f in c.generation_factors],
            }
            for c in model.components
        ],
        "standardization": None,
    }
    s = model.standardization
    if s is not None:
        out["standardization"] = {
            "x_mean": _vec_list(s.x_mean),
            "x_scale": _vec_list(s.x_scale),
            "y_mean": _vec_list(s.y_mean),
        }
    return out


def model_from_dict(d: dict) -> Dst2rModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    ps = tuple(d["predictor_shape"])
    rs = tuple(d["response_shape"])
    comps = [
        UnitRankComponent(tuple(c["contraction"]), tuple(c["generation"]), c["w_p"], c["w_q"])
        for c in d["components"]
    ]
    if len(comps) != d.get("rank", len(comps)):
        raise ValueError("rank field disagrees with component count")
    std = None
    if d.get("standardization"):
        s = d["standardization"]
        std = Standardization(
            np.asarray(s["x_mean"]).reshape(ps, order="F"),
            np.asarray(s["x_scale"]).reshape(ps, order="F"),
            np.asarray(s["y_mean"]).reshape(rs, order="F"),
        )
    return Dst2rModel(tuple(comps), ps, rs, std)


def save_model(path, model: Dst2rModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> Dst2rModel:
    return model_from_dict(json.loads(Path(path).read_text()))

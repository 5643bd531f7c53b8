"""Synthetic planted-model data.

Each factor is drawn standard normal, a fixed number ``floor(d * sparsity)``
of its entries is zeroed at positions sampled without replacement, and it is
then l1-normalized with the magnitude folded into ``w_p`` / ``w_q``.
Predictors are fair Bernoulli tensors; responses are the model's predictions
plus iid Gaussian noise.

A single ``numpy.random.Generator`` stream is consumed in a fixed order
(coefficients, predictors, noise) so a seed pins the whole dataset.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .model import Dst2rModel, UnitRankComponent, load_model, predict_batch, save_model
from .tensor import DenseTensor, DimensionError, read_dten, write_dten

__all__ = [
    "SimSpec",
    "SimDataset",
    "SCENARIOS",
    "gen_coefficients",
    "gen_predictors",
    "gen_responses",
    "make_scenario",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class SimSpec:
    predictor_dims: tuple
    response_dims: tuple
    rank: int = 2
    sparsity: float = 0.2
    n_samples: int = 1000
    noise_sd: float = 0.1
    seed: int = 0

    def __post_init__(self):
        pd = tuple(int(d) for d in self.predictor_dims)
        rd = tuple(int(d) for d in self.response_dims)
        if not pd or not rd or any(d < 1 for d in pd + rd):
            raise ValueError(f"invalid dims {pd} -> {rd}")
        if int(self.rank) < 1:
            raise ValueError("rank must be >= 1")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be >= 0")
        object.__setattr__(self, "predictor_dims", pd)
        object.__setattr__(self, "response_dims", rd)
        object.__setattr__(self, "rank", int(self.rank))
        object.__setattr__(self, "n_samples", int(self.n_samples))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predictor_dims"] = list(self.predictor_dims)
        d["response_dims"] = list(self.response_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimSpec":
        return cls(**d)


@dataclass
class SimDataset:
    X: np.ndarray  # (M,) + predictor_dims
    Y: np.ndarray  # (M,) + response_dims
    true_model: Dst2rModel
    spec: SimSpec

    @property
    def xs(self) -> List[DenseTensor]:
        return [DenseTensor(x) for x in self.X]

    @property
    def ys(self) -> List[DenseTensor]:
        return [DenseTensor(y) for y in self.Y]


# Full-size settings; the sweep scenario's rank is unstated, 2 is our choice.
SCENARIOS = {
    "3d3d": dict(predictor_dims=(8, 8, 8), response_dims=(4, 4, 4), rank=2, sparsity=0.2,
                 n_samples=1000),
    "3d2d": dict(predictor_dims=(8, 8, 8), response_dims=(4, 4), rank=5, sparsity=0.2,
                 n_samples=1000),
    "2d2d-sweep": dict(predictor_dims=(16, 16), response_dims=(4, 4), rank=2, sparsity=0.5,
                       n_samples=1000),
}


def make_scenario(name: str, scale: float = 1.0, **overrides) -> SimSpec:
    """Named experiment settings, with extents and sample count scaled by ``scale``."""
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    if not scale > 0:
        raise ValueError("scale must be > 0")
    base = dict(SCENARIOS[name])
    if scale != 1.0:
        shrink = lambda dims: tuple(max(2, int(round(d * scale))) for d in dims)
        base["predictor_dims"] = shrink(base["predictor_dims"])
        base["response_dims"] = shrink(base["response_dims"])
        base["n_samples"] = max(2, int(round(base["n_samples"] * scale)))
    base.update({k: v for k, v in overrides.items() if v is not None})
    return SimSpec(**base)


def _sparse_factor(d: int, sparsity: float, rng: np.random.Generator) -> np.ndarray:
    n_zero = int(math.floor(d * sparsity))
    if n_zero >= d:
        raise ValueError(f"sparsity {sparsity} zeroes every entry of a length-{d} factor")
    v = rng.standard_normal(d)
    if n_zero:
        v[rng.choice(d, size=n_zero, replace=False)] = 0.0
    return v


def gen_coefficients(spec: SimSpec, rng: np.random.Generator) -> Dst2rModel:
    components = []
    for _ in range(spec.rank):
        parts, mags = [], []
        for dims in (spec.predictor_dims, spec.response_dims):
            betas, w = [], 1.0
            for d in dims:
                v = _sparse_factor(d, spec.sparsity, rng)
                n = float(np.abs(v).sum())
                if n == 0.0:  # every surviving draw was exactly zero
                    raise ValueError("drew an all-zero factor")
                betas.append(v / n)
                w *= n
            parts.append(tuple(betas))
            mags.append(w)
        components.append(UnitRankComponent(parts[0], parts[1], mags[0], mags[1]))
    return Dst2rModel(tuple(components), spec.predictor_dims, spec.response_dims)


def gen_predictors(spec: SimSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.n_samples,) + spec.predictor_dims
    return rng.integers(0, 2, size=shape).astype(np.float64)


def gen_responses(X: np.ndarray, model: Dst2rModel, noise_sd: float,
                  rng: np.random.Generator) -> np.ndarray:
    mean = predict_batch(X, model)
    if noise_sd == 0:
        return mean
    return mean + rng.normal(0.0, noise_sd, size=mean.shape)


def generate_dataset(spec: SimSpec, rng: Optional[np.random.Generator] = None) -> SimDataset:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    model = gen_coefficients(spec, rng)
    X = gen_predictors(spec, rng)
    Y = gen_responses(X, model, spec.noise_sd, rng)
    return SimDataset(X, Y, model, spec)


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(ds: SimDataset, directory) -> Path:
    """Write ``X.dten`` (predictor modes then sample mode), ``Y.dten``, the true model and a manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_dten(out / "X.dten", np.moveaxis(ds.X, 0, -1))
    write_dten(out / "Y.dten", np.moveaxis(ds.Y, 0, -1))
    files = {"predictors": "X.dten", "responses": "Y.dten"}
    if ds.true_model is not None:
        save_model(out / "true_model.json", ds.true_model)
        files["true_model"] = "true_model.json"
    manifest = {"format": "dst2r-dataset", "version": 1, "spec": ds.spec.to_dict(),
                "seed": ds.spec.seed, "files": files}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(directory) -> SimDataset:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    files = manifest["files"]
    X = np.moveaxis(read_dten(d / files["predictors"]).to_numpy(), -1, 0)
    Y = np.moveaxis(read_dten(d / files["responses"]).to_numpy(), -1, 0)
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"{X.shape[0]} predictor samples but {Y.shape[0]} responses")
    spec = SimSpec.from_dict(manifest["spec"])
    if X.shape[1:] != spec.predictor_dims or Y.shape[1:] != spec.response_dims:
        raise DimensionError("stored tensors do not match the manifest dims")
    model = load_model(d / files["true_model"]) if "true_model" in files else None
    return SimDataset(X, Y, model, spec)

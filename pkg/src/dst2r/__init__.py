"""Sparse tensor-on-tensor regression with CP-structured coefficients, fitted by
alternating forward/backward stagewise search."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Dst2rModel,
    RankOneFactor,
    Standardization,
    UnitRankComponent,
    compose_full,
    effective_coefficients,
    load_model,
    predict,
    predict_batch,
    predict_unit_rank,
    save_model,
)
from .evaluation import EvalReport, evaluate_model, sparse_ols_fit  # noqa: E402
from .simulation import SimDataset, SimSpec, generate_dataset, make_scenario  # noqa: E402
from .solver import FitTrace, SolverConfig, fit  # noqa: E402
from .tensor import DenseTensor, DimensionError, FormatError  # noqa: E402

__all__ = [
    "DenseTensor",
    "DimensionError",
    "FormatError",
    "RankOneFactor",
    "UnitRankComponent",
    "Standardization",
    "Dst2rModel",
    "compose_full",
    "effective_coefficients",
    "predict",
    "predict_batch",
    "predict_unit_rank",
    "save_model",
    "load_model",
    "SolverConfig",
    "FitTrace",
    "fit",
    "SimSpec",
    "SimDataset",
    "generate_dataset",
    "make_scenario",
    "EvalReport",
    "evaluate_model",
    "sparse_ols_fit",
]

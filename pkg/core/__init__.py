"""Core module - multi-version tensor completion library."""

from core.errors import (
    ArgumentError,
    IngestionError,
    MVTCError,
    SnapshotFormatError,
    SolverDivergenceError,
    StreamError,
    UnsupportedShapeError,
)
from core.schemas import ExperimentSpec, GeneratorConfig, ScoreReport, SolverConfig
from core.tensor_core import FactorSet, ObservationMask, SparseTensor4, Tensor4

__all__ = [
    "MVTCError",
    "ArgumentError",
    "IngestionError",
    "UnsupportedShapeError",
    "SolverDivergenceError",
    "StreamError",
    "SnapshotFormatError",
    "Tensor4",
    "SparseTensor4",
    "ObservationMask",
    "FactorSet",
    "SolverConfig",
    "GeneratorConfig",
    "ExperimentSpec",
    "ScoreReport",
]

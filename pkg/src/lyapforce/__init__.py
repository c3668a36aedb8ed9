"""Sparsely forced BPTT for reconstructing chaotic dynamics with recurrent networks."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateDataError,
    DivergenceError,
    IntegrationDivergedError,
    LyapForceError,
    NoPositiveExponentError,
    ShapeError,
    SingularMatrixError,
    TrainingDivergedError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateDataError",
    "DivergenceError",
    "IntegrationDivergedError",
    "LyapForceError",
    "NoPositiveExponentError",
    "ShapeError",
    "SingularMatrixError",
    "TrainingDivergedError",
    "UsageError",
    "__version__",
]

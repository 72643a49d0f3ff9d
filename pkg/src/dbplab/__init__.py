"""dbplab: diffusion-based purification laboratory."""
from .errors import (
    ConfigError,
    DBPLabError,
    DeterminismError,
    FormatError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DBPLabError",
    "DeterminismError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "TrainingError",
    "KERNEL_BACKEND",
]

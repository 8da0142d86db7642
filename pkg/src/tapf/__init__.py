"""Audio tokenizer with video-guided fusion losses, built on a small numpy autodiff engine."""

from .config import ExperimentConfig, load, rng_for, save
from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     TapfError)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "load", "save", "rng_for",
    "TapfError", "ConfigError", "ContractError", "DimensionError", "FormatError", "NumericError",
]

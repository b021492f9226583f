"""Probabilistic diffusion alignment on a desk-scale synthetic segmentation benchmark."""

from .config import AugmentRanges, Config
from .errors import (CheckpointError, ConfigError, ContractError, ParseError, PdafError, ShapeError,
                     TrainingAborted)

__version__ = "0.1.0"

__all__ = ["AugmentRanges", "CheckpointError", "Config", "ConfigError", "ContractError",
           "ParseError", "PdafError", "ShapeError", "TrainingAborted", "__version__"]

"""Occluded person re-identification with transformer object queries.

Built on a small numpy reverse-mode autodiff core (:mod:`occreid.diffcore`).
"""
from .errors import (ConfigError, ContractError, LoadError, MetricsError, NumericError,
                     PlacementError, ReIDError, ShapeError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "LoadError", "MetricsError", "NumericError",
           "PlacementError", "ReIDError", "ShapeError", "__version__"]

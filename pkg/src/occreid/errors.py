"""Exception hierarchy shared across the package."""


class ReIDError(Exception):
    """Base class for all package errors."""


class ShapeError(ReIDError, ValueError):
    """Operand extents do not satisfy an operation's shape contract."""


class ContractError(ReIDError, ValueError):
    """A precondition of a public function was violated."""


class ConfigError(ReIDError, ValueError):
    """Invalid configuration value or combination of values."""


class NumericError(ReIDError, ArithmeticError):
    """Non-finite or degenerate numeric value encountered."""


class PlacementError(ReIDError, ValueError):
    """An obstacle cannot be placed inside the target image."""


class MetricsError(ReIDError, ValueError):
    """Retrieval metrics are undefined for the given ranking."""


class LoadError(ReIDError, OSError):
    """A dataset, image or checkpoint could not be loaded."""

"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``uavlos.cli``).
"""


class UavLosError(Exception):
    """Base class for all package errors."""


class ConfigError(UavLosError, ValueError):
    """Invalid configuration (scenario spec, camera, model or experiment config)."""


class NotFoundError(UavLosError, KeyError):
    """A referenced route, sample or parameter does not exist."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DomainError(UavLosError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(UavLosError, ValueError):
    """Tensor shape mismatch."""


class FormatError(UavLosError, ValueError):
    """Malformed dataset or checkpoint file."""


class InsufficientDataError(UavLosError, ValueError):
    """Not enough measurements/samples to carry out an operation."""

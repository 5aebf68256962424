"""Error types shared across the package."""

from .tensor import DimensionError

__all__ = ["DimensionError", "CapacityError", "UsageError", "ValidationError"]


class CapacityError(RuntimeError):
    """A fixed-capacity resource (cache slots, positions) would overflow."""


class UsageError(ValueError):
    """An operation was called in a way its contract forbids."""


class ValidationError(ValueError):
    """Input data failed a documented validity check."""

"""Exception types raised across the package."""


class VhmpcError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(VhmpcError, ValueError):
    pass


class InvalidHorizonError(VhmpcError, ValueError):
    pass


class ShapeError(VhmpcError, ValueError):
    pass


class InvalidTruncationError(VhmpcError, ValueError):
    pass


class InvalidProblemError(VhmpcError, ValueError):
    """Raised for QPs that are not strictly convex or contain non-finite data."""


class ConfigError(VhmpcError, ValueError):
    """Raised for malformed scenarios, checkpoints or CLI configuration."""

"""Exception types shared across the package."""


class ArtError(Exception):
    """Base class for package errors."""


class DimensionError(ArtError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(ArtError, ValueError):
    """Invalid configuration value or incompatible option combination."""


class DataError(ArtError, ValueError):
    """Malformed or missing input data."""


class ContractViolation(ArtError, ValueError):
    """A precondition of an operation was not met."""

"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A numeric argument is outside its domain."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(RuntimeError):
    """An API or command was invoked in an unsupported way."""

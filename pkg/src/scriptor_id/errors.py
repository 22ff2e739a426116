"""Exception types raised across the package."""


class ScriptorError(Exception):
    """Base class for all errors raised by scriptor_id."""


class ShapeError(ScriptorError, ValueError):
    """Array extents do not match what an operation requires."""


class ParameterError(ScriptorError, ValueError):
    """A scalar argument is outside its valid range."""


class SpecError(ScriptorError, ValueError):
    """A network specification violates its invariants."""


class DataError(ScriptorError, ValueError):
    """The data cannot support the requested operation (too few patches, no ink...)."""


class ConfigError(ScriptorError):
    """Malformed or inconsistent experiment configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

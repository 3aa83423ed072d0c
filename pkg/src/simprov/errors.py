"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not chain through the network."""


class NumericError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class InputError(ValueError):
    """Invalid argument value (empty votes, out-of-range labels, ...)."""


class DatasetParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(ValueError):
    """Base class for checkpoint failures."""


class CheckpointSchemaError(CheckpointError):
    """Unsupported or missing schema version."""


class CheckpointParseError(CheckpointError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(ValueError):
    """Unknown key or bad value in an experiment config."""

"""Exception hierarchy shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ToolkitError):
    """Operand shapes are incompatible with the requested operation."""


class StateError(ToolkitError):
    """An object was used in an order its lifecycle does not allow."""


class NumericError(ToolkitError):
    """A computation produced or encountered a non-finite value."""


class ConfigError(ToolkitError):
    """A configuration value is out of range or inconsistent."""


class DatasetError(ToolkitError):
    """A dataset directory or split does not satisfy its preconditions."""


class DecodeError(ToolkitError):
    """An image file could not be decoded; carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointFormatError(ToolkitError):
    """A checkpoint file is malformed; carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(ToolkitError):
    """Training loss became non-finite or exceeded the abort threshold."""


class NoSignalError(ToolkitError):
    """A learning-rate sweep produced no usable minimum."""

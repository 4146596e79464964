"""Exception types shared across the package."""


class DimensionMismatch(ValueError):
    """Operands disagree on vector dimension or shape."""


class DegenerateInput(ValueError):
    """Input is numerically unusable (zero-norm vector, empty batch)."""


class ParameterError(ValueError):
    """A configuration value is out of its legal range."""


class StateError(RuntimeError):
    """Operation invoked in a phase or state that does not support it."""


class DatasetError(ValueError):
    """Malformed interaction data."""


class IndexCorruption(RuntimeError):
    """Index data failed validation.

    When raised by the serializer, carries the byte offset at which the
    problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset

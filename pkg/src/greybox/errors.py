"""Exception types shared across the package."""


class GreyboxError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GreyboxError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(GreyboxError, ValueError):
    """An argument or input file violates a documented precondition."""


class BackwardStateError(GreyboxError, RuntimeError):
    """backward() was called on a graph that has already been consumed."""


class ModelLoadError(ValidationError):
    """A model file is malformed; the message names the offending field."""


class IdxFormatError(ValidationError):
    """An IDX file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset

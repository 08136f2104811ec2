"""Exception types shared across the package."""


class ComrecError(Exception):
    """Base class for all package errors."""


class ShapeError(ComrecError, ValueError):
    """Array dimensions do not agree with what an operation requires."""


class ParameterError(ComrecError, ValueError):
    """An argument is outside its valid range."""


class UsageError(ComrecError, RuntimeError):
    """An object was used in the wrong order or state."""


class DegenerateBatchError(ComrecError, ValueError):
    """Batch statistics requested from fewer than two samples per channel."""


class FormatError(ComrecError, ValueError):
    """A file or byte stream does not follow the expected layout."""


class DecodeError(FormatError):
    """Entropy-coded payload is truncated or corrupt."""

    def __init__(self, message: str, bit_offset: int):
        super().__init__(f"{message} (at bit offset {bit_offset})")
        self.bit_offset = bit_offset


class IngestionError(ComrecError, OSError):
    """An input image file could not be read."""

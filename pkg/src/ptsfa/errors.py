"""Exception types raised across the package."""


class PTSFAError(Exception):
    """Base class for all package errors."""


class DimensionError(PTSFAError, ValueError):
    pass


class NumericError(PTSFAError, ArithmeticError):
    pass


class RangeError(PTSFAError, ValueError):
    pass


class EmptyInputError(PTSFAError, ValueError):
    pass


class DegenerateSampleError(PTSFAError, ValueError):
    pass


class FormatError(PTSFAError, ValueError):
    """Malformed dataset or checkpoint file.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PTSFAError, ValueError):
    pass

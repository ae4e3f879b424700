"""Exception types shared across the toolkit."""


class SeldError(Exception):
    """Base class for all toolkit errors."""


class FormatError(SeldError, ValueError):
    """A file's content is malformed or uses an unsupported encoding."""


class TruncatedFileError(FormatError):
    """A file ends in the middle of a declared structure."""


class ShapeError(SeldError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class InputError(SeldError, ValueError):
    """An input value violates an operation's precondition."""


class DegenerateInputError(InputError):
    """An input is degenerate for the requested operation (e.g. silent signal)."""


class UnsupportedError(SeldError, ValueError):
    """The request is valid but deliberately out of scope."""


class ConfigError(SeldError, ValueError):
    """A model or run configuration is invalid."""


class DataError(SeldError, ValueError):
    """Dataset contents violate the expected schema or ranges."""


class StateError(SeldError, RuntimeError):
    """An object is used before reaching the required state."""


class NumericError(SeldError, ArithmeticError):
    """A numeric contract was violated (NaN/Inf where finite values are required)."""

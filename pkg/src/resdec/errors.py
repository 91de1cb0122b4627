"""Exception types shared across the toolkit."""


class ResdecError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ResdecError, ValueError):
    """Tensor shapes do not conform to a primitive's contract."""


class ContractError(ResdecError, RuntimeError):
    """A precondition of an operation was violated."""


class NumericError(ResdecError, ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""


class InputError(ResdecError, ValueError):
    """Malformed user-supplied data (corpora, ranges, files)."""


class ParseError(InputError):
    """A text file could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(ResdecError, OSError):
    """A checkpoint file is unreadable or corrupted."""

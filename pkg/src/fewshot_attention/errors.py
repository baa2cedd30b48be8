"""Exception hierarchy shared across the package.

The three top-level families map onto CLI exit codes: ValidationError -> 1,
DataError -> 2, DivergenceError -> 3.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Invalid parameter, shape, or input value."""


class DegenerateInputError(ValidationError):
    """Zero-norm vector where a direction is required (cosine, prototypes)."""


class DataError(ValueError):
    """Problem with files, manifests, or dataset contents."""


class ParseError(DataError):
    """Malformed binary or manifest payload."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDataError(DataError):
    """Not enough classes or examples to satisfy a sampling request."""


class MissingClassError(DataError):
    """A class required by the operation has no examples."""


class DivergenceError(ArithmeticError):
    """Non-finite loss or gradient encountered during optimization."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step

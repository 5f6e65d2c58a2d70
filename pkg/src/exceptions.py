"""Exception hierarchy shared by the relighting pipeline and its CLI."""

from typing import Optional


class RelightError(Exception):
    """Base class for all pipeline errors."""


class DataError(RelightError, ValueError):
    """Invalid input data: malformed files, manifests or mismatched shapes."""


class FormatError(DataError):
    """A file could not be parsed.

    Args:
        message: Human readable description of the problem
        offset: Byte offset into the file where parsing failed, if known
        line: 1-based line number where parsing failed, if known
    """

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        location = ""
        if offset is not None:
            location = f" (byte offset {offset})"
        elif line is not None:
            location = f" (line {line})"
        super().__init__(f"{message}{location}")
        self.offset = offset
        self.line = line


class NumericalError(RelightError, ArithmeticError):
    """Non-finite values appeared in a loss, gradient or parameter."""

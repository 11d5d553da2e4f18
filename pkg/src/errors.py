"""
Exception types shared by every module, plus the mapping to CLI exit codes.

    0  success
    2  input validation failure (bad arguments, malformed files, missing paths)
    3  numeric failure (e.g. covariance factorization)
"""

from pathlib import Path
from typing import Optional, Union


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class RetrievalSelectError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(RetrievalSelectError, ValueError):
    """An argument or input violates an operation's precondition."""


class FormatError(DomainError):
    """
    A dataset / prediction / embedding file violates its format.

    Carries the path and, when known, the 1-based line number (JSON-lines
    files) or the record id (binary prediction files).
    """

    def __init__(
        self,
        path: Union[str, Path],
        message: str,
        line: Optional[int] = None,
        record: Optional[str] = None,
    ):
        self.path = str(path)
        self.line = line
        self.record = record

        where = self.path
        if line is not None:
            where += f", line {line}"
        if record is not None:
            where += f", record '{record}'"
        super().__init__(f"{where}: {message}")


class StorageError(RetrievalSelectError, OSError):
    """Reading or writing a file failed at the OS level."""

    def __init__(self, path: Union[str, Path], message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class NumericError(RetrievalSelectError, ArithmeticError):
    """A numerical routine failed (e.g. Cholesky after regularization)."""


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DomainError, StorageError, FileNotFoundError)):
        return EXIT_VALIDATION
    # Anything else is a bug, not an input problem
    return 1

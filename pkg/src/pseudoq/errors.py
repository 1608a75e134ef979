"""Exception hierarchy shared by every module and mapped to CLI exit codes."""

from __future__ import annotations


class PQError(Exception):
    """Base class for all pseudoq errors."""


class ValidationError(PQError, ValueError):
    """Inputs violate a documented precondition."""


class EmptyDocumentError(ValidationError):
    def __init__(self, message: str = "empty document") -> None:
        super().__init__(message)


class FormatError(PQError):
    """A file does not match its declared on-disk format."""


class BadMagicError(FormatError):
    def __init__(self, message: str = "bad magic") -> None:
        super().__init__(message)


class UnsupportedVersionError(FormatError):
    pass


class UnexpectedEOFError(FormatError):
    def __init__(self, message: str = "unexpected EOF") -> None:
        super().__init__(message)


class NonFiniteValueError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


class ParseError(FormatError):
    """Malformed line in a text format (qrels, runs, queries)."""

    def __init__(self, path: str, lineno: int, reason: str) -> None:
        self.path = path
        self.lineno = lineno
        self.reason = reason
        super().__init__(f"{path}:{lineno}: {reason}")


class CorruptFileError(FormatError):
    """Header parsed but record contents are inconsistent."""

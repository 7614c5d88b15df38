"""Exception hierarchy shared by every rvtee module."""

from __future__ import annotations


class RVTeeError(Exception):
    """Base class for all rvtee errors."""


# device / keystream
class InvalidGeometry(RVTeeError, ValueError):
    pass


class KeyExhausted(RVTeeError):
    """No unburned key chunk is left; the device refuses to seal."""


class EmptyData(RVTeeError, ValueError):
    pass


class OutOfRange(RVTeeError, IndexError):
    pass


# sealed log storage
class UnknownLog(RVTeeError, KeyError):
    pass


class StorageFailure(RVTeeError, OSError):
    pass


class MalformedHeader(RVTeeError, ValueError):
    pass


class MalformedRecord(RVTeeError, ValueError):
    pass


# property specs
class ParseError(RVTeeError, ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SemanticError(RVTeeError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class SemanticWarning(UserWarning):
    pass


# monitoring / wire
class OutOfOrderEvent(RVTeeError, ValueError):
    pass


class MalformedEvent(RVTeeError, ValueError):
    pass


class OversizeLine(MalformedEvent):
    pass

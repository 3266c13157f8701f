"""Exception hierarchy shared by every module."""

from __future__ import annotations


class KVQuantError(Exception):
    """Base class for all errors raised by kvquant."""


class ConfigurationError(KVQuantError, ValueError):
    """Invalid parameters (distribution, bitwidth, word size, grid, ...)."""


class DomainError(KVQuantError, ValueError):
    """Shape mismatch, empty input or out-of-range value."""


class FormatError(KVQuantError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)

"""
Errors that cross the terminal and client boundaries.

Each carries the 2-byte code used in wire ERROR messages. Codes that have
an ISO 7816-4 meaning reuse the status word.
"""

from __future__ import annotations

from typing import Dict, Type


class OmapiError(Exception):
    code = 0x6F00

    def __init__(self, message: str = ""):
        super().__init__(message or type(self).__name__)

    @property
    def message(self) -> str:
        return str(self)


class UnknownError(OmapiError):
    code = 0x6F00


class AccessDenied(OmapiError):
    code = 0x6982


class FilteredOut(AccessDenied):
    """Denied by the APDU filter of an otherwise allowed channel."""


class NoChannelAvailable(OmapiError):
    code = 0x6881


class AppletNotFound(OmapiError):
    code = 0x6A82


class PermissionDenied(OmapiError):
    code = 0x0001


class UnknownReader(OmapiError):
    code = 0x0002


class UnknownSession(OmapiError):
    code = 0x0003


class UnknownChannel(OmapiError):
    code = 0x0004


class ChannelEscapeAttempt(OmapiError):
    code = 0x0005


class TerminalUnavailable(OmapiError):
    """The terminal went away (removed, or its plugin process died)."""
    code = 0x0006


class NotAuthenticated(OmapiError):
    code = 0x0007


class ResourceUnavailable(OmapiError):
    """A terminal refused to provide a resource (MissingResourceException)."""
    code = 0x0008


class NotConnected(OmapiError):
    code = 0x0009


class BadRequest(OmapiError):
    code = 0x000A


class LimitExceeded(OmapiError):
    code = 0x000B


ERROR_CODES: Dict[int, Type[OmapiError]] = {
    cls.code: cls for cls in (
        UnknownError, AccessDenied, NoChannelAvailable, AppletNotFound, PermissionDenied,
        UnknownReader, UnknownSession, UnknownChannel, ChannelEscapeAttempt,
        TerminalUnavailable, NotAuthenticated, ResourceUnavailable, NotConnected, BadRequest,
        LimitExceeded,
    )
}


def error_from_code(code: int, message: str = "") -> OmapiError:
    cls = ERROR_CODES.get(code, UnknownError)
    err = cls(message)
    if cls is UnknownError and code != UnknownError.code:
        err.code = code
    return err

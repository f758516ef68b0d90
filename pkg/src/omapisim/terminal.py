"""
The terminal provider contract and the built-in UICC terminal.

A terminal is any object exposing the fourteen operations below; no base
class is required, matching how add-on terminals are looked up by method
name rather than by type.
"""

from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Protocol, runtime_checkable

from . import errors
from .apdu import (SW_APPLET_NOT_FOUND, SW_NO_CHANNEL, SW_OK, CommandApdu, build_manage_channel,
                   build_select, set_channel, status_word)
from .vse import ECHO_AID, VirtualSecureElement

log = logging.getLogger(__name__)

UICC_NAME = "SIM: UICC"

CORE_OPERATIONS = (
    "get_name",
    "is_card_present",
    "internal_connect",
    "internal_disconnect",
    "get_atr",
    "internal_open_logical_channel",
    "internal_open_logical_channel_with_aid",
    "get_select_response",
    "internal_transmit",
    "internal_close_logical_channel",
)

EXTENDED_OPERATIONS = (
    "get_type",
    "is_channel_can_be_established",
    "set_calling_package_info",
    "internal_get_uid",
)

# wire opcode order 0x41..0x4E
CONTRACT_OPERATIONS = (
    "get_name",
    "get_type",
    "is_card_present",
    "internal_connect",
    "internal_disconnect",
    "get_atr",
    "internal_open_logical_channel",
    "internal_open_logical_channel_with_aid",
    "get_select_response",
    "internal_transmit",
    "internal_close_logical_channel",
    "is_channel_can_be_established",
    "set_calling_package_info",
    "internal_get_uid",
)


@runtime_checkable
class TerminalContract(Protocol):
    def get_name(self) -> str: ...
    def get_type(self) -> str: ...
    def is_card_present(self) -> bool: ...
    def internal_connect(self) -> None: ...
    def internal_disconnect(self) -> None: ...
    def get_atr(self) -> Optional[bytes]: ...
    def internal_open_logical_channel(self) -> int: ...
    def internal_open_logical_channel_with_aid(self, aid: bytes) -> int: ...
    def get_select_response(self) -> Optional[bytes]: ...
    def internal_transmit(self, command: bytes) -> bytes: ...
    def internal_close_logical_channel(self, channel: int) -> None: ...
    def is_channel_can_be_established(self) -> bool: ...
    def set_calling_package_info(self, package_name: str, user_id: int, process_id: int) -> None: ...
    def internal_get_uid(self) -> Optional[bytes]: ...


def missing_operations(obj: Any, required=CONTRACT_OPERATIONS) -> list:
    return [name for name in required if not callable(getattr(obj, name, None))]


class TerminalKind(enum.Enum):
    BUILT_IN = "builtin"
    ADDON_LEGACY = "legacy"
    ADDON_HARDENED = "hardened"


@dataclass
class TerminalRecord:
    name: str
    kind: TerminalKind
    terminal: Any
    package: Optional[str] = None
    entry: Optional[str] = None
    lock: threading.RLock = field(default_factory=threading.RLock)

    def call(self, op: str, *args):
        """One contract call, exclusive per terminal."""
        with self.lock:
            return getattr(self.terminal, op)(*args)


@dataclass
class ProbeResult:
    outcomes: Dict[str, str]
    missing: list

    @property
    def conformant(self) -> bool:
        return not self.missing and all(not v.startswith("bad:") for v in self.outcomes.values())


def conformance_probe(terminal: Any) -> ProbeResult:
    """Call every contract operation once.

    An operation passes when it returns a value of the contract type or
    raises one of the typed terminal errors.
    """
    missing = missing_operations(terminal)
    outcomes: Dict[str, str] = {}

    def attempt(op, check, *args):
        if op in missing:
            return None
        try:
            value = getattr(terminal, op)(*args)
        except errors.OmapiError as exc:
            outcomes[op] = f"raised:{type(exc).__name__}"
            return None
        except Exception as exc:  # noqa: BLE001 - any other failure is non-conformant
            outcomes[op] = f"bad:{type(exc).__name__}: {exc}"
            return None
        outcomes[op] = "ok" if check(value) else f"bad:returned {value!r}"
        return value

    def opt_bytes(v):
        return v is None or isinstance(v, (bytes, bytearray))

    attempt("get_name", lambda v: isinstance(v, str) and v != "")
    attempt("get_type", lambda v: isinstance(v, str))
    attempt("is_card_present", lambda v: isinstance(v, bool))
    attempt("set_calling_package_info", lambda v: v is None, "conformance.probe", 0, 0)
    attempt("internal_connect", lambda v: v is None)
    attempt("get_atr", opt_bytes)
    attempt("internal_get_uid", opt_bytes)
    attempt("is_channel_can_be_established", lambda v: isinstance(v, bool))
    ch1 = attempt("internal_open_logical_channel", lambda v: isinstance(v, int) and 0 <= v <= 3)
    ch2 = attempt("internal_open_logical_channel_with_aid",
                  lambda v: isinstance(v, int) and 0 <= v <= 3, ECHO_AID)
    attempt("get_select_response", opt_bytes)
    cmd = CommandApdu(0x00, 0xB0, 0x00, 0x00, le=2)
    if ch2:
        cmd = set_channel(cmd, ch2)
    attempt("internal_transmit", lambda v: isinstance(v, (bytes, bytearray)) and len(v) >= 2,
            cmd.to_bytes())
    closed = False
    for ch in (ch1, ch2):
        if ch:
            attempt("internal_close_logical_channel", lambda v: v is None, ch)
            closed = True
    if not closed:
        attempt("internal_close_logical_channel", lambda v: v is None, 1)
    attempt("internal_disconnect", lambda v: v is None)
    return ProbeResult(outcomes, missing)


class UiccTerminal:
    """Built-in terminal driving a VirtualSecureElement."""

    def __init__(self, element: VirtualSecureElement, name: str = UICC_NAME,
                 card_present: bool = True):
        self.element = element
        self.name = name
        self.card_present = card_present
        self.connected = False
        self._atr: Optional[bytes] = None
        self._select_response: Optional[bytes] = None
        self.calling_package = None

    def get_name(self) -> str:
        return self.name

    def get_type(self) -> str:
        return "SIM"

    def is_card_present(self) -> bool:
        return self.card_present

    def internal_connect(self) -> None:
        if not self.card_present:
            raise errors.NotConnected(f"{self.name}: no card in slot")
        with self.element.lock:
            self._atr = self.element.reset()
        self.connected = True

    def internal_disconnect(self) -> None:
        self.connected = False
        self._atr = None

    def get_atr(self) -> Optional[bytes]:
        return self._atr if self.connected else None

    def _process(self, raw: bytes) -> bytes:
        if not (self.connected and self.card_present):
            raise errors.NotConnected(f"{self.name}: not connected")
        with self.element.lock:
            return self.element.process(raw)

    def internal_open_logical_channel(self) -> int:
        response = self._process(build_manage_channel(True).to_bytes())
        sw = status_word(response)
        if sw == SW_NO_CHANNEL:
            raise errors.NoChannelAvailable(f"{self.name}: no logical channel available")
        if sw != SW_OK or len(response) != 3:
            raise errors.UnknownError(f"{self.name}: MANAGE CHANNEL returned {response.hex().upper()}")
        self._select_response = None
        return response[0]

    def internal_open_logical_channel_with_aid(self, aid: bytes) -> int:
        channel = self.internal_open_logical_channel()
        response = self._process(set_channel(build_select(aid), channel).to_bytes())
        sw = status_word(response)
        if sw != SW_OK:
            self.internal_close_logical_channel(channel)
            if sw == SW_APPLET_NOT_FOUND:
                raise errors.AppletNotFound(f"{self.name}: applet {bytes(aid).hex().upper()} not found")
            raise errors.UnknownError(f"{self.name}: SELECT returned {sw:04X}")
        self._select_response = response
        return channel

    def get_select_response(self) -> Optional[bytes]:
        return self._select_response

    def internal_transmit(self, command: bytes) -> bytes:
        return self._process(bytes(command))

    def internal_close_logical_channel(self, channel: int) -> None:
        if channel == 0:
            return
        response = self._process(build_manage_channel(False, channel).to_bytes())
        if status_word(response) != SW_OK:
            log.warning("%s: closing channel %d returned %s", self.name, channel, response.hex().upper())

    def is_channel_can_be_established(self) -> bool:
        if not self.connected:
            return False
        with self.element.lock:
            return self.element.logical_channels_open() < 3

    def set_calling_package_info(self, package_name: str, user_id: int, process_id: int) -> None:
        self.calling_package = (package_name, user_id, process_id)

    def internal_get_uid(self) -> Optional[bytes]:
        return None

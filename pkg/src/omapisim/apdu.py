"""
ISO 7816-4 short-form APDU codec.

Command cases 1-4 are told apart purely by length arithmetic; extended
length fields are rejected. Logical channels 0-3 live in the two low bits
of an interindustry CLA byte.
"""

from __future__ import annotations

import binascii
from dataclasses import dataclass, replace
from typing import Optional

SW_OK = 0x9000
SW_APPLET_NOT_FOUND = 0x6A82
SW_NO_CHANNEL = 0x6881
SW_SECURITY_NOT_SATISFIED = 0x6982
SW_UNKNOWN = 0x6F00

LE_MAX = 256

INS_SELECT = 0xA4
INS_MANAGE_CHANNEL = 0x70
INS_GET_DATA = 0xCA


class ApduError(ValueError):
    pass


class InvalidApdu(ApduError):
    pass


class TooShort(ApduError):
    pass


class LengthMismatch(ApduError):
    pass


class ExtendedNotSupported(ApduError):
    pass


class ChannelOutOfRange(ApduError):
    pass


class ProprietaryClass(ApduError):
    pass


class BadAidLength(ApduError):
    pass


class CannotCloseBasicChannel(ApduError):
    pass


def to_hex(data: bytes) -> str:
    """Uppercase hex, no separators."""
    return binascii.hexlify(bytes(data)).decode("ascii").upper()


def from_hex(text: str) -> bytes:
    """Parse hex, tolerating spaces and colons between bytes."""
    cleaned = "".join(text.replace(":", " ").split())
    try:
        return binascii.unhexlify(cleaned)
    except (binascii.Error, ValueError) as exc:
        raise ValueError(f"invalid hex string {text!r}") from exc


def _check_byte(name: str, value: int) -> None:
    if not isinstance(value, int) or not 0 <= value <= 0xFF:
        raise InvalidApdu(f"{name} must be a byte, got {value!r}")


@dataclass(frozen=True)
class CommandApdu:
    cla: int
    ins: int
    p1: int
    p2: int
    data: bytes = b""
    le: Optional[int] = None

    def __post_init__(self):
        for name in ("cla", "ins", "p1", "p2"):
            _check_byte(name, getattr(self, name))
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > 255:
            raise InvalidApdu(f"data too long for short APDU: {len(self.data)}")
        if self.le is not None and not 1 <= self.le <= LE_MAX:
            raise InvalidApdu(f"le out of range: {self.le}")

    @property
    def case(self) -> int:
        if not self.data:
            return 1 if self.le is None else 2
        return 3 if self.le is None else 4

    @property
    def header(self) -> bytes:
        return bytes((self.cla, self.ins, self.p1, self.p2))

    def to_bytes(self) -> bytes:
        return serialize_command(self)

    def hex(self) -> str:
        return to_hex(serialize_command(self))

    def __repr__(self):
        return f"CommandApdu({self.hex()})"


@dataclass(frozen=True)
class ResponseApdu:
    data: bytes = b""
    sw1: int = 0x90
    sw2: int = 0x00

    def __post_init__(self):
        _check_byte("sw1", self.sw1)
        _check_byte("sw2", self.sw2)
        object.__setattr__(self, "data", bytes(self.data))

    @classmethod
    def from_sw(cls, sw: int, data: bytes = b"") -> "ResponseApdu":
        return cls(data, (sw >> 8) & 0xFF, sw & 0xFF)

    @property
    def sw(self) -> int:
        return self.sw1 * 256 + self.sw2

    def to_bytes(self) -> bytes:
        return serialize_response(self)

    def hex(self) -> str:
        return to_hex(serialize_response(self))


def parse_command(raw: bytes) -> CommandApdu:
    raw = bytes(raw)
    n = len(raw)
    if n < 4:
        raise TooShort(f"command APDU needs 4 header bytes, got {n}")
    cla, ins, p1, p2 = raw[:4]
    if n == 4:
        return CommandApdu(cla, ins, p1, p2)
    if n == 5:
        return CommandApdu(cla, ins, p1, p2, le=raw[4] or LE_MAX)
    lc = raw[4]
    if lc == 0:
        # a zero first length byte followed by more bytes is the extended form
        raise ExtendedNotSupported("extended length fields are not supported")
    if n == 5 + lc:
        return CommandApdu(cla, ins, p1, p2, raw[5:])
    if n == 6 + lc:
        return CommandApdu(cla, ins, p1, p2, raw[5:-1], raw[-1] or LE_MAX)
    raise LengthMismatch(f"Lc={lc} inconsistent with total length {n}")


def serialize_command(cmd: CommandApdu) -> bytes:
    out = bytearray(cmd.header)
    if cmd.data:
        out.append(len(cmd.data))
        out += cmd.data
    if cmd.le is not None:
        out.append(cmd.le & 0xFF)  # 256 encodes as 0x00
    return bytes(out)


def parse_response(raw: bytes) -> ResponseApdu:
    raw = bytes(raw)
    if len(raw) < 2:
        raise TooShort(f"response APDU needs a status word, got {len(raw)} bytes")
    return ResponseApdu(raw[:-2], raw[-2], raw[-1])


def serialize_response(resp: ResponseApdu) -> bytes:
    return resp.data + bytes((resp.sw1, resp.sw2))


def status_word(raw: bytes) -> int:
    """Status word of a serialized response; raises TooShort if absent."""
    return parse_response(raw).sw


def _require_interindustry(cla: int) -> None:
    if cla & 0x80:
        raise ProprietaryClass(f"CLA {cla:02X} is not interindustry")


def set_channel(cmd: CommandApdu, channel: int) -> CommandApdu:
    _require_interindustry(cmd.cla)
    if not 0 <= channel <= 3:
        raise ChannelOutOfRange(f"channel {channel} outside 0..3")
    return replace(cmd, cla=(cmd.cla & 0xFC) | channel)


def get_channel(cmd: CommandApdu) -> int:
    _require_interindustry(cmd.cla)
    return cmd.cla & 0x03


def build_select(aid: bytes) -> CommandApdu:
    aid = bytes(aid)
    if not 5 <= len(aid) <= 16:
        raise BadAidLength(f"AID must be 5..16 bytes, got {len(aid)}")
    return CommandApdu(0x00, INS_SELECT, 0x04, 0x00, aid, LE_MAX)


def build_manage_channel(open: bool, channel: int = 0) -> CommandApdu:
    if open:
        return CommandApdu(0x00, INS_MANAGE_CHANNEL, 0x00, 0x00, le=1)
    if channel == 0:
        raise CannotCloseBasicChannel("the basic channel cannot be closed")
    if not 1 <= channel <= 3:
        raise ChannelOutOfRange(f"channel {channel} outside 1..3")
    return CommandApdu(0x00, INS_MANAGE_CHANNEL, 0x80, channel)


def is_select_by_aid(cmd: CommandApdu) -> bool:
    return cmd.ins == INS_SELECT and cmd.p1 == 0x04

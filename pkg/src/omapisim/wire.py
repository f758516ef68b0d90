"""
Framed binary protocol for both hops: client <-> service and
service <-> out-of-process terminal module.

Frame:   length (4 bytes, big-endian, 1..65535) || payload
Payload: type (1 byte) || body

Body field encodings: text = u16 length + UTF-8; blob = u16 length + bytes;
optblob = u8 presence flag + blob when present; id = u32; token = 16 raw
bytes; flag = one byte 00/01; texts = u8 count + that many texts.
Replies carry the request type with the high bit set; 0x7F is ERROR.
"""

from __future__ import annotations

import enum
import hmac
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from . import errors

MAX_FRAME = 65535
TOKEN_LEN = 16


class WireError(ValueError):
    pass


class FrameTooLarge(WireError):
    pass


class ZeroLengthFrame(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownType(WireError):
    pass


class MalformedBody(WireError):
    pass


class ConnectionClosed(ConnectionError):
    """Peer closed the stream cleanly between frames."""


class MsgType(enum.IntEnum):
    # client hop
    HELLO = 0x01
    LIST_READERS = 0x02
    OPEN_SESSION = 0x03
    OPEN_CHANNEL = 0x04
    TRANSMIT = 0x05
    CLOSE_CHANNEL = 0x06
    CLOSE_SESSION = 0x07
    HELLO_OK = 0x81
    READERS = 0x82
    SESSION = 0x83
    CHANNEL = 0x84
    RESPONSE = 0x85
    CHANNEL_CLOSED = 0x86
    SESSION_CLOSED = 0x87
    ERROR = 0x7F
    # terminal hop
    BIND = 0x40
    T_GET_NAME = 0x41
    T_GET_TYPE = 0x42
    T_IS_CARD_PRESENT = 0x43
    T_CONNECT = 0x44
    T_DISCONNECT = 0x45
    T_GET_ATR = 0x46
    T_OPEN_CHANNEL = 0x47
    T_OPEN_CHANNEL_AID = 0x48
    T_GET_SELECT_RESPONSE = 0x49
    T_TRANSMIT = 0x4A
    T_CLOSE_CHANNEL = 0x4B
    T_IS_CHANNEL_CAN_BE_ESTABLISHED = 0x4C
    T_SET_CALLING_PACKAGE_INFO = 0x4D
    T_GET_UID = 0x4E
    BOUND = 0xC0
    R_GET_NAME = 0xC1
    R_GET_TYPE = 0xC2
    R_IS_CARD_PRESENT = 0xC3
    R_CONNECT = 0xC4
    R_DISCONNECT = 0xC5
    R_GET_ATR = 0xC6
    R_OPEN_CHANNEL = 0xC7
    R_OPEN_CHANNEL_AID = 0xC8
    R_GET_SELECT_RESPONSE = 0xC9
    R_TRANSMIT = 0xCA
    R_CLOSE_CHANNEL = 0xCB
    R_IS_CHANNEL_CAN_BE_ESTABLISHED = 0xCC
    R_SET_CALLING_PACKAGE_INFO = 0xCD
    R_GET_UID = 0xCE


T = MsgType

SCHEMAS: Dict[MsgType, Tuple[Tuple[str, str], ...]] = {
    T.HELLO: (("package_name", "text"), ("auth_token", "token")),
    T.LIST_READERS: (),
    T.OPEN_SESSION: (("reader_index", "u8"),),
    T.OPEN_CHANNEL: (("session_id", "id"), ("aid", "blob")),
    T.TRANSMIT: (("channel_id", "id"), ("apdu", "blob")),
    T.CLOSE_CHANNEL: (("channel_id", "id"),),
    T.CLOSE_SESSION: (("session_id", "id"),),
    T.HELLO_OK: (("uid", "id"),),
    T.READERS: (("names", "texts"),),
    T.SESSION: (("session_id", "id"),),
    T.CHANNEL: (("channel_id", "id"), ("select_response", "blob")),
    T.RESPONSE: (("apdu", "blob"),),
    T.CHANNEL_CLOSED: (),
    T.SESSION_CLOSED: (),
    T.ERROR: (("code", "u16"), ("message", "text")),
    T.BIND: (("bind_token", "token"), ("package_name", "text")),
    T.BOUND: (),
    T.T_GET_NAME: (),
    T.T_GET_TYPE: (),
    T.T_IS_CARD_PRESENT: (),
    T.T_CONNECT: (),
    T.T_DISCONNECT: (),
    T.T_GET_ATR: (),
    T.T_OPEN_CHANNEL: (),
    T.T_OPEN_CHANNEL_AID: (("aid", "blob"),),
    T.T_GET_SELECT_RESPONSE: (),
    T.T_TRANSMIT: (("apdu", "blob"),),
    T.T_CLOSE_CHANNEL: (("channel", "u8"),),
    T.T_IS_CHANNEL_CAN_BE_ESTABLISHED: (),
    T.T_SET_CALLING_PACKAGE_INFO: (("package_name", "text"), ("user_id", "id"), ("process_id", "id")),
    T.T_GET_UID: (),
    T.R_GET_NAME: (("name", "text"),),
    T.R_GET_TYPE: (("type", "text"),),
    T.R_IS_CARD_PRESENT: (("value", "flag"),),
    T.R_CONNECT: (),
    T.R_DISCONNECT: (),
    T.R_GET_ATR: (("atr", "optblob"),),
    T.R_OPEN_CHANNEL: (("channel", "u8"),),
    T.R_OPEN_CHANNEL_AID: (("channel", "u8"),),
    T.R_GET_SELECT_RESPONSE: (("response", "optblob"),),
    T.R_TRANSMIT: (("apdu", "blob"),),
    T.R_CLOSE_CHANNEL: (),
    T.R_IS_CHANNEL_CAN_BE_ESTABLISHED: (("value", "flag"),),
    T.R_SET_CALLING_PACKAGE_INFO: (),
    T.R_GET_UID: (("uid", "optblob"),),
}

# terminal contract operation -> request opcode, in contract order
TERMINAL_OPCODES = {
    "get_name": T.T_GET_NAME,
    "get_type": T.T_GET_TYPE,
    "is_card_present": T.T_IS_CARD_PRESENT,
    "internal_connect": T.T_CONNECT,
    "internal_disconnect": T.T_DISCONNECT,
    "get_atr": T.T_GET_ATR,
    "internal_open_logical_channel": T.T_OPEN_CHANNEL,
    "internal_open_logical_channel_with_aid": T.T_OPEN_CHANNEL_AID,
    "get_select_response": T.T_GET_SELECT_RESPONSE,
    "internal_transmit": T.T_TRANSMIT,
    "internal_close_logical_channel": T.T_CLOSE_CHANNEL,
    "is_channel_can_be_established": T.T_IS_CHANNEL_CAN_BE_ESTABLISHED,
    "set_calling_package_info": T.T_SET_CALLING_PACKAGE_INFO,
    "internal_get_uid": T.T_GET_UID,
}
OPCODE_OPERATIONS = {v: k for k, v in TERMINAL_OPCODES.items()}


def reply_type(request: MsgType) -> MsgType:
    return MsgType(request | 0x80)


@dataclass(frozen=True)
class Message:
    type: MsgType
    fields: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "type", MsgType(self.type))

    def __getitem__(self, key: str) -> Any:
        return self.fields[key]

    def __eq__(self, other):
        return isinstance(other, Message) and self.type == other.type and self.fields == other.fields

    def __hash__(self):
        return hash(self.type)


def msg(type_: MsgType, **fields) -> Message:
    return Message(MsgType(type_), fields)


def error_msg(exc: errors.OmapiError) -> Message:
    return msg(T.ERROR, code=exc.code, message=exc.message)


# -- framing -------------------------------------------------------------

def encode_frame(payload: bytes) -> bytes:
    n = len(payload)
    if n == 0:
        raise ZeroLengthFrame("frames must carry at least one byte")
    if n > MAX_FRAME:
        raise FrameTooLarge(f"payload of {n} bytes exceeds {MAX_FRAME}")
    return struct.pack(">I", n) + bytes(payload)


def _check_length(n: int) -> None:
    if n == 0:
        raise ZeroLengthFrame("zero-length frame")
    if n > MAX_FRAME:
        raise FrameTooLarge(f"frame announces {n} bytes")


def decode_frame(stream: bytes) -> Tuple[bytes, bytes]:
    """Split one frame off ``stream``; returns (payload, remaining bytes)."""
    stream = bytes(stream)
    if len(stream) < 4:
        raise Truncated("frame header incomplete")
    (n,) = struct.unpack(">I", stream[:4])
    _check_length(n)
    if len(stream) < 4 + n:
        raise Truncated(f"frame needs {n} payload bytes, {len(stream) - 4} available")
    return stream[4:4 + n], stream[4 + n:]


def _recv_exact(sock: socket.socket, n: int, at_boundary: bool) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if at_boundary and not buf:
                raise ConnectionClosed("peer closed the connection")
            raise Truncated(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4, True))
    _check_length(n)
    return _recv_exact(sock, n, False)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(encode_frame(payload))


# -- message codec -------------------------------------------------------

def _enc_field(kind: str, value: Any, name: str) -> bytes:
    try:
        if kind == "text":
            raw = value.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise MalformedBody(f"{name}: text too long")
            return struct.pack(">H", len(raw)) + raw
        if kind == "blob":
            raw = bytes(value)
            if len(raw) > 0xFFFF:
                raise MalformedBody(f"{name}: blob too long")
            return struct.pack(">H", len(raw)) + raw
        if kind == "optblob":
            return b"\x00" if value is None else b"\x01" + _enc_field("blob", value, name)
        if kind == "id":
            return struct.pack(">I", value)
        if kind == "u16":
            return struct.pack(">H", value)
        if kind == "u8":
            return struct.pack(">B", value)
        if kind == "flag":
            if not isinstance(value, bool):
                raise MalformedBody(f"{name}: flag must be bool")
            return b"\x01" if value else b"\x00"
        if kind == "token":
            raw = bytes(value)
            if len(raw) != TOKEN_LEN:
                raise MalformedBody(f"{name}: token must be {TOKEN_LEN} bytes")
            return raw
        if kind == "texts":
            items = list(value)
            if len(items) > 0xFF:
                raise MalformedBody(f"{name}: too many entries")
            return bytes((len(items),)) + b"".join(_enc_field("text", t, name) for t in items)
    except (struct.error, AttributeError, TypeError, ValueError) as exc:
        if isinstance(exc, MalformedBody):
            raise
        raise MalformedBody(f"{name}: {exc}") from exc
    raise AssertionError(kind)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedBody("body ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def field(self, kind: str) -> Any:
        if kind in ("text", "blob"):
            (n,) = struct.unpack(">H", self.take(2))
            raw = self.take(n)
            if kind == "blob":
                return raw
            try:
                return raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedBody(f"invalid UTF-8: {exc}") from None
        if kind == "optblob":
            flag = self.take(1)[0]
            if flag > 1:
                raise MalformedBody("bad presence flag")
            return self.field("blob") if flag else None
        if kind == "id":
            return struct.unpack(">I", self.take(4))[0]
        if kind == "u16":
            return struct.unpack(">H", self.take(2))[0]
        if kind == "u8":
            return self.take(1)[0]
        if kind == "flag":
            b = self.take(1)[0]
            if b > 1:
                raise MalformedBody("bad flag byte")
            return bool(b)
        if kind == "token":
            return self.take(TOKEN_LEN)
        if kind == "texts":
            count = self.take(1)[0]
            return [self.field("text") for _ in range(count)]
        raise AssertionError(kind)


def encode_msg(m: Message) -> bytes:
    schema = SCHEMAS.get(m.type)
    if schema is None:
        raise UnknownType(f"no schema for {m.type!r}")
    if set(m.fields) != {name for name, _ in schema}:
        raise MalformedBody(f"{m.type.name}: fields {sorted(m.fields)} do not match schema")
    return bytes((m.type,)) + b"".join(_enc_field(kind, m.fields[name], name) for name, kind in schema)


def decode_msg(data: bytes) -> Message:
    data = bytes(data)
    if not data:
        raise MalformedBody("empty message")
    try:
        mtype = MsgType(data[0])
    except ValueError:
        raise UnknownType(f"unknown message type {data[0]:02X}") from None
    reader = _Reader(data[1:])
    values = {name: reader.field(kind) for name, kind in SCHEMAS[mtype]}
    if reader.pos != len(reader.data):
        raise MalformedBody(f"{mtype.name}: {len(reader.data) - reader.pos} trailing bytes")
    return Message(mtype, values)


def send_msg(sock: socket.socket, m: Message) -> None:
    write_frame(sock, encode_msg(m))


def recv_msg(sock: socket.socket) -> Message:
    return decode_msg(read_frame(sock))


def tokens_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(bytes(a), bytes(b))


def raise_if_error(m: Message, expected: Optional[MsgType] = None) -> Message:
    """Turn an ERROR reply into the matching exception; check the reply type."""
    if m.type == T.ERROR:
        raise errors.error_from_code(m["code"], m["message"])
    if expected is not None and m.type != expected:
        raise errors.BadRequest(f"expected {expected.name}, got {m.type.name}")
    return m


def catalog() -> List[MsgType]:
    return list(SCHEMAS)

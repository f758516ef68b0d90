"""
Client side of the smartcard service socket.

``WireClient`` speaks the framed protocol; the service module offers an
in-process ``LocalClient`` with the same methods.
"""

from __future__ import annotations

import socket
import time
from pathlib import Path
from typing import List, Optional, Tuple, Union

from . import errors, wire
from .apdu import from_hex
from .config import PathLike, read_kv

CREDENTIALS_SUFFIX = ".client"

Reader = Union[int, str]


class WireClient:
    def __init__(self, path: PathLike, package_name: str, auth_token: bytes,
                 timeout: Optional[float] = 30.0, connect_retries: int = 0):
        self.path = str(path)
        self.sock = _connect(self.path, timeout, connect_retries)
        self.uid = None
        reply = self._call(wire.msg(wire.MsgType.HELLO, package_name=package_name,
                                    auth_token=bytes(auth_token)), wire.MsgType.HELLO_OK)
        self.uid = reply["uid"]

    def _call(self, request: wire.Message, expected: wire.MsgType) -> wire.Message:
        try:
            wire.send_msg(self.sock, request)
            reply = wire.recv_msg(self.sock)
        except (OSError, wire.ConnectionClosed) as exc:
            raise errors.TerminalUnavailable(f"service connection lost: {exc}") from exc
        return wire.raise_if_error(reply, expected)

    def list_readers(self) -> List[str]:
        return list(self._call(wire.msg(wire.MsgType.LIST_READERS), wire.MsgType.READERS)["names"])

    def open_session(self, reader: Reader) -> int:
        if isinstance(reader, str):
            names = self.list_readers()
            if reader not in names:
                raise errors.UnknownReader(f"no reader named {reader!r}")
            reader = names.index(reader)
        if not 0 <= reader <= 0xFF:
            raise errors.UnknownReader(f"reader index {reader} out of range")
        return self._call(wire.msg(wire.MsgType.OPEN_SESSION, reader_index=reader),
                          wire.MsgType.SESSION)["session_id"]

    def open_channel(self, session_id: int, aid: bytes) -> Tuple[int, bytes]:
        m = self._call(wire.msg(wire.MsgType.OPEN_CHANNEL, session_id=session_id, aid=bytes(aid)),
                       wire.MsgType.CHANNEL)
        return m["channel_id"], m["select_response"]

    def transmit(self, channel_id: int, apdu: bytes) -> bytes:
        return self._call(wire.msg(wire.MsgType.TRANSMIT, channel_id=channel_id, apdu=bytes(apdu)),
                          wire.MsgType.RESPONSE)["apdu"]

    def close_channel(self, channel_id: int) -> None:
        self._call(wire.msg(wire.MsgType.CLOSE_CHANNEL, channel_id=channel_id), wire.MsgType.CHANNEL_CLOSED)

    def close_session(self, session_id: int) -> None:
        self._call(wire.msg(wire.MsgType.CLOSE_SESSION, session_id=session_id), wire.MsgType.SESSION_CLOSED)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _connect(path: str, timeout: Optional[float], retries: int) -> socket.socket:
    attempt = 0
    while True:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout)
        try:
            sock.connect(path)
            return sock
        except OSError:
            sock.close()
            if attempt >= retries:
                raise
            attempt += 1
            time.sleep(0.05 * attempt)


def credentials_path(sock_path: PathLike) -> Path:
    p = Path(sock_path)
    return p.with_name(p.name + CREDENTIALS_SUFFIX)


def write_credentials(sock_path: PathLike, package_name: str, token: bytes) -> Path:
    path = credentials_path(sock_path)
    path.write_text(f"package_name = {package_name}\nauth_token = {token.hex().upper()}\n", encoding="utf-8")
    path.chmod(0o600)
    return path


def read_credentials(sock_path: PathLike) -> Tuple[str, bytes]:
    values = read_kv(credentials_path(sock_path))
    return values["package_name"], from_hex(values["auth_token"])


def connect(sock_path: PathLike, timeout: Optional[float] = 30.0) -> WireClient:
    """Connect with the client-app credentials a running daemon published next to its socket."""
    package, token = read_credentials(sock_path)
    return WireClient(sock_path, package, token, timeout)

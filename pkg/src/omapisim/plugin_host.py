"""
Runs inside a hardened add-on's own process.

The service end of a socketpair arrives as an inherited descriptor along
with a JSON bootstrap in the environment. The first message must be a
BIND carrying the token the platform told us to expect; anything else and
the connection is dropped before the terminal is even constructed.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import sys
from pathlib import Path
from typing import Callable, Optional

from . import errors, wire
from .audit import AuditLog
from .client import WireClient
from .context import PluginContext
from .discovery import PLUGIN_ENV
from .sandbox import IdentityContext, Sandbox, identity_scope

log = logging.getLogger(__name__)

Factory = Callable[[PluginContext], object]


def _reply_fields(op: str, value) -> dict:
    request = wire.TERMINAL_OPCODES[op]
    names = [name for name, _ in wire.SCHEMAS[wire.reply_type(request)]]
    if not names:
        return {}
    return {names[0]: value}


def _args(op: str, m: wire.Message) -> tuple:
    if op == "set_calling_package_info":
        return (m["package_name"], m["user_id"], m["process_id"])
    return tuple(m.fields.values())


def serve(sock: socket.socket, factory: Factory, context: PluginContext,
          expected_token: Optional[bytes], audit: AuditLog, connect_service=None) -> int:
    """Handle one service connection; returns a process exit status."""
    ident = context.identity
    with identity_scope(ident):
        try:
            first = wire.recv_msg(sock)
        except (wire.WireError, wire.ConnectionClosed, OSError) as exc:
            audit.record("bind_rejected", package=ident.package_name, reason=type(exc).__name__)
            sock.close()
            return 1
        if first.type != wire.MsgType.BIND or (
                expected_token is not None and not wire.tokens_equal(first["bind_token"], expected_token)):
            audit.record("bind_rejected", package=ident.package_name,
                         reason="not a BIND" if first.type != wire.MsgType.BIND else "bad token")
            sock.close()
            return 1
        audit.record("bound", package=ident.package_name, uid=ident.uid, peer=first["package_name"])
        terminal = factory(context)
        wire.send_msg(sock, wire.msg(wire.MsgType.BOUND))
        if connect_service is not None:
            context.run_pending(connect_service)
        while True:
            try:
                m = wire.recv_msg(sock)
            except (wire.ConnectionClosed, OSError):
                return 0
            except wire.WireError as exc:
                wire.send_msg(sock, wire.error_msg(errors.BadRequest(str(exc))))
                return 1
            op = wire.OPCODE_OPERATIONS.get(m.type)
            if op is None:
                wire.send_msg(sock, wire.error_msg(errors.BadRequest(f"unexpected {m.type.name}")))
                continue
            audit.record("contract_call", package=ident.package_name, uid=ident.uid, op=op)
            try:
                value = getattr(terminal, op)(*_args(op, m))
                reply = wire.msg(wire.reply_type(m.type), **_reply_fields(op, value))
            except errors.OmapiError as exc:
                reply = wire.error_msg(exc)
            except Exception as exc:  # noqa: BLE001 - surfaced to the service as UnknownError
                log.exception("terminal operation %s failed", op)
                reply = wire.error_msg(errors.UnknownError(f"{op}: {type(exc).__name__}: {exc}"))
            try:
                wire.send_msg(sock, reply)
            except OSError:
                return 0


def main(factory: Factory, environ=None) -> int:
    environ = os.environ if environ is None else environ
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="plugin %(process)d %(levelname)s %(message)s")
    boot = json.loads(environ[PLUGIN_ENV])
    audit = AuditLog(boot.get("audit_log"))
    sandbox = Sandbox.from_snapshot(boot["sandbox"], audit)
    identity: IdentityContext = sandbox.identity_for(boot["package"])
    sock = socket.socket(fileno=boot["fd"])
    sink = Path(boot["report_sink"]) if boot.get("report_sink") else None
    service_socket = Path(boot["service_socket"]) if boot.get("service_socket") else None
    context = PluginContext(sandbox, identity, service_socket, audit, sink)
    token = bytes.fromhex(boot["bind_token"]) if boot.get("bind_token") else None

    connect = None
    if service_socket is not None:
        own_token = sandbox.auth_token(identity.uid)

        def connect_service():
            return WireClient(service_socket, identity.package_name, own_token, connect_retries=40)
        connect = connect_service

    status = serve(sock, factory, context, token, audit, connect)
    # give a running service callback a moment to finish its report
    for t in context.callback_threads:
        t.join(timeout=10)
    return status

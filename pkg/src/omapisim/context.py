"""
Contexts handed to add-on terminal constructors.

A context answers "who am I" questions through the package manager and
permission checks, exposes the system capability gateways, lets the
holder connect to the smartcard service as a client, and can hand a text
payload to an activity of some package (the report sink).

The legacy loader passes the service's own context; the out-of-process
plugin host builds a PluginContext for the plugin's own identity.
"""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path
from typing import Callable, List, Optional

from .audit import AuditLog
from .sandbox import (IdentityContext, PermissionResult, Sandbox, SystemServices, current_identity,
                      identity_scope)

log = logging.getLogger(__name__)

ServiceCallback = Callable[[object], None]


class PackageManagerView:
    """The read-only slice of the package manager a context exposes."""

    def __init__(self, sandbox: Sandbox):
        self._sandbox = sandbox

    def get_installed_packages(self) -> List[str]:
        return [p.name for p in self._sandbox.get_installed_packages()]

    def get_packages_for_uid(self, uid: int) -> List[str]:
        return [p.name for p in self._sandbox.packages_for_uid(uid)]

    def get_name_for_uid(self, uid: int) -> str:
        return self._sandbox.name_for_uid(uid)


def write_sink(sink: Optional[Path], text: str) -> None:
    """Replace the sink's contents in one step so readers never see half a report."""
    if sink is None:
        return
    sink = Path(sink)
    sink.parent.mkdir(parents=True, exist_ok=True)
    tmp = sink.with_name(f".{sink.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, sink)


class Context:
    """Common behavior; subclasses decide how the service is reached."""

    def __init__(self, sandbox: Sandbox, package_name: str, system: SystemServices,
                 audit: Optional[AuditLog] = None, report_sink: Optional[Path] = None):
        self.sandbox = sandbox
        self._package_name = package_name
        self.system_services = system
        self.audit = audit if audit is not None else sandbox.audit
        self.report_sink = Path(report_sink) if report_sink else None
        self.delivered: List[tuple] = []

    def get_package_name(self) -> str:
        return self._package_name

    def get_package_manager(self) -> PackageManagerView:
        return PackageManagerView(self.sandbox)

    def check_permission(self, permission: str, pid: int, uid: int) -> PermissionResult:
        return self.sandbox.check_permission(permission, pid, uid)

    def start_activity(self, package: str, activity: str, payload: str) -> None:
        """Deliver ``payload`` to ``package``'s activity; here, write it to the report sink."""
        sender = current_identity()
        self.audit.record("deliver", sender_uid=sender.uid, sender_package=sender.package_name,
                          target_package=package, activity=activity, sink=str(self.report_sink or ""))
        self.delivered.append((package, activity, payload))
        write_sink(self.report_sink, payload)

    def bind_se_service(self, callback: ServiceCallback) -> None:
        raise NotImplementedError


class PluginContext(Context):
    """Context of an add-on running in its own process under its own uid."""

    def __init__(self, sandbox: Sandbox, identity: IdentityContext, service_socket: Optional[Path] = None,
                 audit: Optional[AuditLog] = None, report_sink: Optional[Path] = None):
        super().__init__(sandbox, identity.package_name, SystemServices(sandbox), audit, report_sink)
        self.identity = identity
        self.service_socket = service_socket
        self._pending: List[tuple] = []
        self.callback_threads: List[threading.Thread] = []

    def bind_se_service(self, callback: ServiceCallback) -> None:
        # connects once the host finishes binding; the service is busy loading us until then
        self._pending.append((current_identity(), callback))

    def run_pending(self, connect: Callable[[], object]) -> List[threading.Thread]:
        threads = []
        pending, self._pending = self._pending, []
        for ident, callback in pending:
            def work(ident=ident, callback=callback):
                with identity_scope(ident):
                    try:
                        client = connect()
                    except Exception as exc:  # noqa: BLE001 - reported to the callback
                        log.warning("plugin could not reach the service: %s", exc)
                        client = exc
                    callback(client)
            t = threading.Thread(target=work, name="se-service-callback", daemon=True)
            t.start()
            threads.append(t)
        self.callback_threads += threads
        return threads

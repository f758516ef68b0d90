"""
End-to-end exploit demonstration in one call.

Sets up a scratch device (plugin root with the exploit bundle, socket,
audit log, report sink), boots the service in the requested loader mode,
lists readers as an ordinary client over the socket and collects whatever
report the exploit delivered.
"""

from __future__ import annotations

import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

from . import EXPLOIT_BUNDLE, GOLDENS_DIR
from .client import connect
from .config import ServiceConfig
from .exploit import EXPLOIT_PACKAGE, normalize_report, parse_report
from .sandbox import MODIFY_PHONE_STATE, WRITE_SECURE_SETTINGS
from .service import SmartcardService

SERVICE_EXCLUSIVE = frozenset({WRITE_SECURE_SETTINGS, MODIFY_PHONE_STATE})
EXPECTED_READERS = {
    "legacy": ["SIM: UICC", "EXPLOIT01"],
    "none": ["SIM: UICC"],
}


def golden_for(mode: str, profile: str) -> Optional[Path]:
    if mode == "legacy":
        path = GOLDENS_DIR / f"{profile}_legacy.txt"
    elif mode == "hardened":
        path = GOLDENS_DIR / "hardened.txt"
    else:
        return None
    return path if path.exists() else None


@dataclass
class DemoResult:
    mode: str
    profile: str
    readers: List[str]
    report_text: Optional[str]
    service_uid: int
    service_permissions: List[str]
    plugin_uid: Optional[int]
    plugin_permissions: List[str]
    registered: List[str]
    rejections: List[Tuple[str, str]] = field(default_factory=list)
    golden: Optional[Path] = None
    workdir: Optional[Path] = None

    @property
    def report(self) -> dict:
        return parse_report(self.report_text) if self.report_text else {}

    @property
    def report_uid(self) -> Optional[int]:
        value = self.report.get("User ID")
        return int(value) if value else None

    @property
    def report_permissions(self) -> List[str]:
        return list(self.report.get("Granted permissions", []))

    @property
    def escalation(self) -> str:
        return "CONFIRMED" if self.report_uid == self.service_uid else "CONTAINED"

    @property
    def golden_match(self) -> Optional[bool]:
        if self.golden is None:
            return None
        if self.report_text is None:
            return False
        return normalize_report(self.report_text) == self.golden.read_text(encoding="utf-8")

    def checks(self) -> List[Tuple[str, bool]]:
        """The properties this mode is expected to show."""
        out = []
        expected = EXPECTED_READERS.get(self.mode)
        if expected is not None:
            out.append(("readers", self.readers == expected))
        if self.mode == "legacy":
            out.append(("escalation", self.escalation == "CONFIRMED"))
            out.append(("permissions", self.report_permissions == self.service_permissions))
        elif self.mode == "hardened":
            out.append(("escalation", self.escalation == "CONTAINED"))
            if self.registered:
                out.append(("identity", self.report_uid is not None and self.report_uid == self.plugin_uid))
                out.append(("permissions", self.report_permissions == self.plugin_permissions
                            and not SERVICE_EXCLUSIVE & set(self.report_permissions)))
        else:
            out.append(("escalation", self.report_text is None))
        if self.golden is not None:
            out.append(("golden", bool(self.golden_match)))
        return out

    @property
    def holds(self) -> bool:
        return all(ok for _, ok in self.checks())

    def lines(self) -> List[str]:
        out = [
            f"mode: {self.mode}",
            f"profile: {self.profile}",
            f"service_uid: {self.service_uid}",
            f"service_permissions: {','.join(self.service_permissions)}",
        ]
        out += [f"reader: {r}" for r in self.readers]
        out += [f"addon: {name}" for name in self.registered]
        out += [f"rejected: {pkg} {reason}" for pkg, reason in self.rejections]
        if self.report_text is None:
            out.append("report: none")
        else:
            out.append(f"report_uid: {self.report_uid}")
            out.append(f"report_permissions: {','.join(self.report_permissions)}")
            out.append(f"identity_match: {str(self.report_uid == self.service_uid).lower()}")
        if self.plugin_uid is not None:
            out.append(f"plugin_uid: {self.plugin_uid}")
        out.append(f"escalation: {self.escalation}")
        if self.golden is not None:
            out.append(f"golden: {self.golden.name} {'match' if self.golden_match else 'MISMATCH'}")
        for name, ok in self.checks():
            out.append(f"check_{name}: {'pass' if ok else 'FAIL'}")
        return out


def install_bundle(plugin_root: Path, bundle: Path = EXPLOIT_BUNDLE) -> Path:
    target = Path(plugin_root) / bundle.name
    if not target.exists():
        shutil.copytree(bundle, target, ignore=shutil.ignore_patterns("__pycache__"))
    return target


def _wait_for(path: Path, timeout: float) -> Optional[str]:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if path.exists():
            return path.read_text(encoding="utf-8")
        time.sleep(0.02)
    return path.read_text(encoding="utf-8") if path.exists() else None


def run_demo(mode: str = "legacy", profile: str = "nexus6", config: Optional[ServiceConfig] = None,
             workdir: Optional[Union[str, Path]] = None, report_out: Optional[Union[str, Path]] = None,
             golden: Union[str, Path, None] = "auto", timeout: float = 20.0) -> DemoResult:
    own_tmp = None
    if workdir is None:
        own_tmp = tempfile.mkdtemp(prefix="omapisim-demo-")
        workdir = own_tmp
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    base = config or ServiceConfig()
    cfg = replace(
        base, loader_mode=mode, profile=profile,
        plugin_root=base.plugin_root or work / "plugins",
        socket=base.socket or work / "omapi.sock",
        report_sink=Path(report_out) if report_out else (base.report_sink or work / "report.txt"),
        audit_log=base.audit_log or work / "audit.jsonl",
    )
    cfg.__post_init__()
    cfg.plugin_root.mkdir(parents=True, exist_ok=True)
    install_bundle(cfg.plugin_root)
    if cfg.report_sink.exists():
        cfg.report_sink.unlink()

    service = SmartcardService(cfg)
    try:
        service.start(serve=True)
        with connect(cfg.socket) as client:
            readers = client.list_readers()
        registered = [rec.name for rec in service.addon_records()]
        report_text = None
        if registered:
            report_text = _wait_for(cfg.report_sink, timeout)
        plugin_uid = None
        plugin_perms: List[str] = []
        try:
            rec = service.sandbox.get_package(EXPLOIT_PACKAGE)
            plugin_uid = rec.uid
            plugin_perms = sorted(rec.granted_permissions)
        except Exception:  # noqa: BLE001 - not installed (no plugin root match)
            pass
        svc_perms = sorted(service.sandbox.permissions_for_uid(service.identity.uid))
        if golden == "auto":
            golden_path = golden_for(mode, profile)
        else:
            golden_path = Path(golden) if golden else None
        return DemoResult(mode, profile, readers, report_text, service.identity.uid, svc_perms,
                          plugin_uid, plugin_perms, registered, list(service.rejections), golden_path, work)
    finally:
        service.stop()
        if own_tmp is not None:
            shutil.rmtree(own_tmp, ignore_errors=True)

"""
Simulated package manager, permission model and caller identity.

Packages carry a uid, a 20-byte signing-certificate hash and the set of
permissions granted at install time. The identity a piece of code runs
under is ambient: ``run_as`` installs it for the current task (thread or
asyncio task) and ``current_identity`` reads it back, the same way code in
a process implicitly inherits that process's uid.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
import hashlib
import hmac
import os
import secrets
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, TypeVar

from .audit import AuditLog

T = TypeVar("T")

NFC = "android.permission.NFC"
RECEIVE_BOOT_COMPLETED = "android.permission.RECEIVE_BOOT_COMPLETED"
READ_EXTERNAL_STORAGE = "android.permission.READ_EXTERNAL_STORAGE"
WRITE_EXTERNAL_STORAGE = "android.permission.WRITE_EXTERNAL_STORAGE"
WRITE_SECURE_SETTINGS = "android.permission.WRITE_SECURE_SETTINGS"
WRITE_SETTINGS = "android.permission.WRITE_SETTINGS"
MODIFY_PHONE_STATE = "android.permission.MODIFY_PHONE_STATE"
INTERNET = "android.permission.INTERNET"
SMARTCARD = "org.simalliance.openmobileapi.SMARTCARD"
BIND_TERMINAL = "org.simalliance.openmobileapi.BIND_TERMINAL"

PERMISSIONS: FrozenSet[str] = frozenset({
    NFC, RECEIVE_BOOT_COMPLETED, READ_EXTERNAL_STORAGE, WRITE_EXTERNAL_STORAGE,
    WRITE_SECURE_SETTINGS, WRITE_SETTINGS, MODIFY_PHONE_STATE, INTERNET,
    SMARTCARD, BIND_TERMINAL,
})

# signature|system level: never granted to an ordinary third-party install
PRIVILEGED_PERMISSIONS: FrozenSet[str] = frozenset({
    WRITE_SECURE_SETTINGS, MODIFY_PHONE_STATE, BIND_TERMINAL,
})

SERVICE_PACKAGE = "org.simalliance.openmobileapi.service"
SERVICE_PROCESS = "org.simalliance.openmobileapi.service:remote"
SERVICE_SHARED_USER = "org.simalliance.uid.openmobileapi"
SERVICE_SIGNATURE = hashlib.sha1(b"omapisim platform key: " + SERVICE_PACKAGE.encode()).digest()

CLIENT_PACKAGE = "org.example.seclient"
CLIENT_UID = 10050
CLIENT_SIGNATURE = hashlib.sha1(b"omapisim developer key: " + CLIENT_PACKAGE.encode()).digest()

FIRST_APP_UID = 10100


class SandboxError(Exception):
    pass


class DuplicatePackage(SandboxError):
    pass


class UnknownUid(SandboxError):
    pass


class UnknownPackage(SandboxError):
    pass


class NoIdentity(SandboxError):
    pass


class SecurityError(SandboxError):
    """Raised by a capability gateway; names the missing permission."""

    def __init__(self, message: str, op: str, permission: str):
        super().__init__(message)
        self.op = op
        self.permission = permission


class PermissionResult(enum.Enum):
    GRANTED = 0
    DENIED = -1


@dataclass(frozen=True)
class PackageRecord:
    name: str
    uid: int
    signature_hash: bytes
    granted_permissions: FrozenSet[str] = frozenset()
    shared_user: Optional[str] = None
    process_name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "signature_hash", bytes(self.signature_hash))
        object.__setattr__(self, "granted_permissions", frozenset(self.granted_permissions))
        if len(self.signature_hash) != 20:
            raise ValueError("signature hash must be 20 bytes")

    @property
    def user_name(self) -> str:
        return f"{self.shared_user or self.name}:{self.uid}"


@dataclass(frozen=True)
class IdentityContext:
    uid: int
    pid: int
    tid: int
    package_name: str
    process_name: str
    user_name: str


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    service_uid: int
    service_permissions: FrozenSet[str]
    service_package: str = SERVICE_PACKAGE
    service_process: str = SERVICE_PROCESS


PROFILES: Dict[str, DeviceProfile] = {
    "nexus6": DeviceProfile(
        "nexus6", 10023,
        frozenset({MODIFY_PHONE_STATE, NFC, RECEIVE_BOOT_COMPLETED, WRITE_SECURE_SETTINGS}),
    ),
    "oppo": DeviceProfile(
        "oppo", 1032,
        frozenset({NFC, READ_EXTERNAL_STORAGE, RECEIVE_BOOT_COMPLETED, WRITE_SECURE_SETTINGS}),
    ),
}


_current: contextvars.ContextVar[Optional[IdentityContext]] = contextvars.ContextVar(
    "omapisim_identity", default=None)


def current_identity() -> IdentityContext:
    ident = _current.get()
    if ident is None:
        raise NoIdentity("no identity installed for this task")
    return ident


def current_identity_or_none() -> Optional[IdentityContext]:
    return _current.get()


@contextlib.contextmanager
def identity_scope(identity: IdentityContext):
    token = _current.set(identity)
    try:
        yield identity
    finally:
        _current.reset(token)


def run_as(identity: IdentityContext, task: Callable[..., T], *args, **kwargs) -> T:
    """Run ``task`` with ``identity`` as the ambient caller; restored afterwards."""
    with identity_scope(identity):
        return task(*args, **kwargs)


class Sandbox:
    """Package registry plus the credentials the platform hands out."""

    def __init__(self, audit: Optional[AuditLog] = None):
        self._lock = threading.RLock()
        self._packages: Dict[str, PackageRecord] = {}
        self._auth_tokens: Dict[int, bytes] = {}
        self._bind_token = secrets.token_bytes(16)
        self.audit = audit if audit is not None else AuditLog()

    # -- registry ---------------------------------------------------------
    def install_package(self, record: PackageRecord) -> PackageRecord:
        with self._lock:
            if record.name in self._packages:
                raise DuplicatePackage(f"package {record.name} already installed")
            for other in self._packages.values():
                if other.uid == record.uid and not (
                        record.shared_user and record.shared_user == other.shared_user):
                    raise DuplicatePackage(f"uid {record.uid} already used by {other.name}")
            self._packages[record.name] = record
            return record

    def install_app(self, name: str, signature_hash: bytes,
                    requested: Iterable[str] = (), uid: Optional[int] = None) -> PackageRecord:
        """Install a third-party app: fresh uid, privileged permissions stripped."""
        with self._lock:
            if uid is None:
                used = {p.uid for p in self._packages.values()}
                uid = FIRST_APP_UID
                while uid in used:
                    uid += 1
            granted = frozenset(p for p in requested if p in PERMISSIONS and p not in PRIVILEGED_PERMISSIONS)
            return self.install_package(PackageRecord(name, uid, signature_hash, granted))

    def grant(self, package: str, *permissions: str) -> PackageRecord:
        with self._lock:
            rec = self.get_package(package)
            rec = replace(rec, granted_permissions=rec.granted_permissions | set(permissions))
            self._packages[package] = rec
            return rec

    def uninstall_package(self, name: str) -> None:
        with self._lock:
            if self._packages.pop(name, None) is None:
                raise UnknownPackage(name)

    def get_installed_packages(self) -> List[PackageRecord]:
        with self._lock:
            return list(self._packages.values())

    def get_package(self, name: str) -> PackageRecord:
        with self._lock:
            try:
                return self._packages[name]
            except KeyError:
                raise UnknownPackage(name) from None

    def packages_for_uid(self, uid: int) -> List[PackageRecord]:
        with self._lock:
            return [p for p in self._packages.values() if p.uid == uid]

    def name_for_uid(self, uid: int) -> str:
        pkgs = self.packages_for_uid(uid)
        if not pkgs:
            raise UnknownUid(f"uid {uid} is not registered")
        return pkgs[0].user_name

    def permissions_for_uid(self, uid: int) -> FrozenSet[str]:
        pkgs = self.packages_for_uid(uid)
        if not pkgs:
            raise UnknownUid(f"uid {uid} is not registered")
        return frozenset().union(*(p.granted_permissions for p in pkgs))

    def check_permission(self, permission: str, pid: int, uid: int) -> PermissionResult:
        granted = self.permissions_for_uid(uid)
        if permission in PERMISSIONS and permission in granted:
            return PermissionResult.GRANTED
        return PermissionResult.DENIED

    def identity_for(self, package: str, pid: Optional[int] = None,
                     tid: Optional[int] = None) -> IdentityContext:
        rec = self.get_package(package)
        pid = os.getpid() if pid is None else pid
        tid = threading.get_native_id() if tid is None else tid
        return IdentityContext(rec.uid, pid, tid, rec.name, rec.process_name or rec.name, rec.user_name)

    # -- credentials ------------------------------------------------------
    def auth_token(self, uid: int) -> bytes:
        """Per-uid credential a client presents when connecting to a service."""
        with self._lock:
            if not self.packages_for_uid(uid):
                raise UnknownUid(f"uid {uid} is not registered")
            return self._auth_tokens.setdefault(uid, secrets.token_bytes(16))

    def uid_for_token(self, token: bytes) -> Optional[int]:
        with self._lock:
            items = list(self._auth_tokens.items())
        found = None
        for uid, known in items:
            if hmac.compare_digest(known, bytes(token)):
                found = uid
        return found

    def bind_token(self, identity: IdentityContext) -> bytes:
        """Issued only to holders of BIND_TERMINAL."""
        if self.check_permission(BIND_TERMINAL, identity.pid, identity.uid) is not PermissionResult.GRANTED:
            raise SecurityError(
                f"Permission denial: binding terminals requires {BIND_TERMINAL}", "bind", BIND_TERMINAL)
        return self._bind_token

    def expected_bind_token(self) -> bytes:
        """What the platform tells a terminal module to accept when it enforces BIND_TERMINAL."""
        return self._bind_token

    # -- cross-process view ----------------------------------------------
    def snapshot(self, own_uid: Optional[int] = None) -> dict:
        """Serializable view of the registry; carries at most one credential."""
        with self._lock:
            data = {"packages": [
                {"name": p.name, "uid": p.uid, "signature_hash": p.signature_hash.hex(),
                 "granted": sorted(p.granted_permissions), "shared_user": p.shared_user,
                 "process_name": p.process_name}
                for p in self._packages.values()]}
        if own_uid is not None:
            data["own_uid"] = own_uid
            data["auth_token"] = self.auth_token(own_uid).hex()
        return data

    @classmethod
    def from_snapshot(cls, data: dict, audit: Optional[AuditLog] = None) -> "Sandbox":
        sb = cls(audit)
        for p in data["packages"]:
            sb.install_package(PackageRecord(
                p["name"], p["uid"], bytes.fromhex(p["signature_hash"]), frozenset(p["granted"]),
                p.get("shared_user"), p.get("process_name")))
        if "own_uid" in data:
            sb._auth_tokens[data["own_uid"]] = bytes.fromhex(data["auth_token"])
        return sb


def provision(profile: DeviceProfile, audit: Optional[AuditLog] = None,
              hardened: bool = False) -> Sandbox:
    """Sandbox with the smartcard service package and one ordinary client app."""
    sb = Sandbox(audit)
    perms = set(profile.service_permissions)
    if hardened:
        # the out-of-process service binds terminal modules
        perms.add(BIND_TERMINAL)
    sb.install_package(PackageRecord(
        profile.service_package, profile.service_uid, SERVICE_SIGNATURE, frozenset(perms),
        shared_user=SERVICE_SHARED_USER, process_name=profile.service_process))
    sb.install_package(PackageRecord(
        CLIENT_PACKAGE, CLIENT_UID, CLIENT_SIGNATURE, frozenset({SMARTCARD, NFC, INTERNET})))
    return sb


def get_profile(name: str) -> DeviceProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise SandboxError(f"unknown device profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class SystemServices:
    """Capability gateways guarded by platform permissions.

    Nothing real happens: each call records an audit event and updates the
    simulated device state below.
    """

    sandbox: Sandbox
    uicc: Optional[Callable[[bytes], bytes]] = None
    nfc_enabled: bool = False
    secure_settings: Dict[str, str] = field(default_factory=dict)
    calls_answered: int = 0
    external_files: Dict[str, bytes] = field(default_factory=dict)

    def _ctx(self, ctx: Optional[IdentityContext]) -> IdentityContext:
        return ctx if ctx is not None else current_identity()

    def _has(self, ctx: IdentityContext, permission: str) -> bool:
        return self.sandbox.check_permission(permission, ctx.pid, ctx.uid) is PermissionResult.GRANTED

    def _deny(self, op: str, ctx: IdentityContext, permission: str, message: str):
        self.sandbox.audit.record("gateway", op=op, uid=ctx.uid, result="denied", permission=permission)
        raise SecurityError(message, op, permission)

    def _enforce_caller(self, op: str, ctx: IdentityContext, permission: str) -> None:
        if not self._has(ctx, permission):
            self._deny(op, ctx, permission, f"Neither user {ctx.uid} nor current process has {permission}.")

    def _ok(self, op: str, ctx: IdentityContext, **detail) -> None:
        self.sandbox.audit.record("gateway", op=op, uid=ctx.uid, result="ok", **detail)

    def toggle_nfc(self, ctx: Optional[IdentityContext] = None, enable: bool = True) -> bool:
        ctx = self._ctx(ctx)
        self._enforce_caller("toggle_nfc", ctx, WRITE_SECURE_SETTINGS)
        self.nfc_enabled = enable
        self._ok("toggle_nfc", ctx, enable=enable)
        return True

    def write_secure_setting(self, ctx: Optional[IdentityContext], key: str, value: str) -> bool:
        ctx = self._ctx(ctx)
        for perm, what in ((WRITE_SECURE_SETTINGS, "secure settings"), (WRITE_SETTINGS, "settings")):
            if not self._has(ctx, perm):
                self._deny("write_secure_setting", ctx, perm,
                           f"Permission denial: writing to {what} requires {perm}")
        self.secure_settings[key] = value
        self._ok("write_secure_setting", ctx, key=key)
        return True

    def answer_ringing_call(self, ctx: Optional[IdentityContext] = None) -> bool:
        ctx = self._ctx(ctx)
        self._enforce_caller("answer_ringing_call", ctx, MODIFY_PHONE_STATE)
        self.calls_answered += 1
        self._ok("answer_ringing_call", ctx)
        return True

    def icc_exchange_apdu(self, ctx: Optional[IdentityContext], command: bytes) -> bytes:
        """Raw UICC access through telephony; no access control enforcer on this path."""
        ctx = self._ctx(ctx)
        self._enforce_caller("icc_exchange_apdu", ctx, MODIFY_PHONE_STATE)
        if self.uicc is None:
            raise SandboxError("no UICC attached to telephony")
        response = self.uicc(bytes(command))
        self._ok("icc_exchange_apdu", ctx, command=bytes(command), response=response)
        return response

    def open_socket(self, ctx: Optional[IdentityContext] = None, host: str = "example.org") -> bool:
        ctx = self._ctx(ctx)
        if not self._has(ctx, INTERNET):
            self._deny("open_socket", ctx, INTERNET, f"Permission denial: open_socket requires {INTERNET}")
        self._ok("open_socket", ctx, host=host)
        return True

    def write_external_storage(self, ctx: Optional[IdentityContext], name: str, data: bytes) -> bool:
        ctx = self._ctx(ctx)
        if not self._has(ctx, WRITE_EXTERNAL_STORAGE):
            self._deny("write_external_storage", ctx, WRITE_EXTERNAL_STORAGE,
                       f"Permission denial: write_external_storage requires {WRITE_EXTERNAL_STORAGE}")
        self.external_files[name] = bytes(data)
        self._ok("write_external_storage", ctx, name=name)
        return True

"""Line-based ``key = value`` files used for service, element and bundle config."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Union

from .apdu import from_hex

PathLike = Union[str, Path]

LOADER_MODES = ("none", "legacy", "hardened")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> Dict[str, str]:
    """Blank lines and ``#`` comments are ignored; keys must be unique."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(values: Dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def read_kv(path: PathLike) -> Dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(encoding="utf-8"), str(p))


def parse_bool(value: str, key: str = "value") -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _resolve(base: Path, value: str) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


@dataclass
class ServiceConfig:
    profile: str = "nexus6"
    loader_mode: str = "legacy"
    plugin_root: Optional[Path] = None
    allowlist: Optional[FrozenSet[bytes]] = None
    vendor_prefixes: bool = False
    socket: Optional[Path] = None
    report_sink: Optional[Path] = None
    audit_log: Optional[Path] = None
    element: Optional[Path] = None
    builtin_terminals: List[str] = field(default_factory=lambda: ["uicc"])
    session_limit: int = 16
    channels_per_session: int = 3

    def __post_init__(self):
        if self.loader_mode not in LOADER_MODES:
            raise ConfigError(f"loader_mode must be one of {LOADER_MODES}, got {self.loader_mode!r}")

    @classmethod
    def from_dict(cls, values: Dict[str, str], base: Path = Path(".")) -> "ServiceConfig":
        known = {"profile", "loader_mode", "plugin_root", "allowlist", "vendor_prefixes", "socket",
                 "report_sink", "audit_log", "element", "builtin_terminals", "session_limit",
                 "channels_per_session"}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown service config keys: {sorted(unknown)}")
        cfg = cls()
        if "profile" in values:
            cfg.profile = values["profile"]
        if "loader_mode" in values:
            cfg.loader_mode = values["loader_mode"].lower()
        for key in ("plugin_root", "socket", "report_sink", "audit_log", "element"):
            if values.get(key):
                setattr(cfg, key, _resolve(base, values[key]))
        if "allowlist" in values:
            try:
                hashes = frozenset(from_hex(h) for h in parse_list(values["allowlist"]))
            except ValueError as exc:
                raise ConfigError(f"allowlist: {exc}") from exc
            if any(len(h) != 20 for h in hashes):
                raise ConfigError("allowlist entries must be 20-byte hashes")
            cfg.allowlist = hashes
        if "vendor_prefixes" in values:
            cfg.vendor_prefixes = parse_bool(values["vendor_prefixes"], "vendor_prefixes")
        if "builtin_terminals" in values:
            cfg.builtin_terminals = parse_list(values["builtin_terminals"])
        for key in ("session_limit", "channels_per_session"):
            if key in values:
                try:
                    setattr(cfg, key, int(values[key]))
                except ValueError:
                    raise ConfigError(f"{key}: expected an integer") from None
        cfg.__post_init__()
        return cfg

    @classmethod
    def load(cls, path: PathLike) -> "ServiceConfig":
        p = Path(path)
        return cls.from_dict(read_kv(p), p.resolve().parent)

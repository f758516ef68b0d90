"""Append-only event log shared by the daemon, gateways and plugin hosts."""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Iterator, List, Optional


class AuditLog:
    """Events are kept in memory and, when a path is given, appended as JSON lines.

    Several processes may append to the same file; each record is written
    with a single write call on a file opened in append mode.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None
        self._events: List[dict] = []
        self._lock = threading.Lock()

    def record(self, event: str, **fields) -> dict:
        entry = {"event": event, "ts": round(time.time(), 6), **fields}
        line = json.dumps(entry, sort_keys=True, default=_jsonable) + "\n"
        with self._lock:
            self._events.append(entry)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line)
        return entry

    def events(self, event: Optional[str] = None, **match) -> List[dict]:
        with self._lock:
            items = list(self._events)
        return [e for e in items if _matches(e, event, match)]

    def __iter__(self) -> Iterator[dict]:
        return iter(self.events())

    def __len__(self):
        with self._lock:
            return len(self._events)


def _jsonable(value):
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex().upper()
    if isinstance(value, (set, frozenset, tuple)):
        return sorted(value) if isinstance(value, (set, frozenset)) else list(value)
    return str(value)


def _matches(entry: dict, event: Optional[str], match: dict) -> bool:
    if event is not None and entry.get("event") != event:
        return False
    return all(entry.get(k) == v for k, v in match.items())


def read_audit_file(path, event: Optional[str] = None, **match) -> List[dict]:
    """Read events written by any process into a JSON-lines audit file."""
    p = Path(path)
    if not p.exists():
        return []
    out = []
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        if _matches(entry, event, match):
            out.append(entry)
    return out

"""
Virtual secure element: a simulated UICC with a basic channel, three
logical channels and applets addressed by AID.

``process`` takes raw command bytes and always returns a well-formed
response; every fault is reported as a status word.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from . import access_control as ac
from .apdu import (INS_GET_DATA, INS_MANAGE_CHANNEL, LE_MAX, SW_APPLET_NOT_FOUND, SW_NO_CHANNEL,
                   SW_OK, SW_UNKNOWN, ApduError, CommandApdu, from_hex, is_select_by_aid,
                   parse_command)
from .config import ConfigError, PathLike, format_kv, parse_bool, parse_list, read_kv

log = logging.getLogger(__name__)

ARA_AID = bytes.fromhex("A00000015141434C00")
ECHO_AID = bytes.fromhex("A0000000184543484F")
DEFAULT_ATR = from_hex("3B 9F 96 80 3F C7 82 80 31 E0 73 FE 21 1B 64 07 68 9A 00 82 90 00")

GET_DATA_ALL = CommandApdu(0x80, INS_GET_DATA, 0xFF, 0x40, le=LE_MAX)

NUM_CHANNELS = 4


class DuplicateAid(Exception):
    pass


class UnknownAid(Exception):
    pass


def _sw(sw: int) -> bytes:
    return bytes((sw >> 8, sw & 0xFF))


class Applet:
    """Base applet: answers every command with 6F00."""

    def __init__(self, aid: bytes, select_response: bytes = b""):
        aid = bytes(aid)
        if not 5 <= len(aid) <= 16:
            raise ValueError(f"AID must be 5..16 bytes, got {len(aid)}")
        self.aid = aid
        self.select_response = bytes(select_response)

    def process(self, cmd: CommandApdu) -> bytes:
        return _sw(SW_UNKNOWN)

    def __repr__(self):
        return f"{type(self).__name__}({self.aid.hex().upper()})"


class EchoApplet(Applet):
    """Returns the command data followed by 9000."""

    def __init__(self, aid: bytes = ECHO_AID):
        super().__init__(aid, bytes((0x6F, len(aid) + 2, 0x84, len(aid))) + bytes(aid))

    def process(self, cmd: CommandApdu) -> bytes:
        return cmd.data + _sw(SW_OK)


class AraApplet(Applet):
    """Serves the access rule database through GET DATA (ALL)."""

    def __init__(self, rule_db: ac.AccessRuleDb, aid: bytes = ARA_AID):
        super().__init__(aid)
        self.rule_db = rule_db

    def process(self, cmd: CommandApdu) -> bytes:
        if cmd.ins == INS_GET_DATA and (cmd.cla & 0xFC) == 0x80 and (cmd.p1, cmd.p2) == (0xFF, 0x40):
            return ac.encode_rule_db(self.rule_db) + _sw(SW_OK)
        return _sw(SW_UNKNOWN)


class _Open:
    __slots__ = ("selected",)

    def __init__(self, selected: Optional[bytes] = None):
        self.selected = selected

    def __repr__(self):
        return f"Open({self.selected.hex().upper() if self.selected else None})"


class VirtualSecureElement:
    """Not thread-safe by itself; the owning terminal serializes access."""

    def __init__(self, atr: bytes = DEFAULT_ATR, applets: Iterable[Applet] = ()):
        self.atr = bytes(atr)
        self.applets: Dict[bytes, Applet] = {}
        self.channels: List[Optional[_Open]] = [_Open()] + [None] * (NUM_CHANNELS - 1)
        self.lock = threading.RLock()
        for applet in applets:
            self.install_applet(applet)

    def reset(self) -> bytes:
        self.channels = [_Open()] + [None] * (NUM_CHANNELS - 1)
        return self.atr

    def open_channels(self) -> List[int]:
        return [n for n, state in enumerate(self.channels) if state is not None]

    def logical_channels_open(self) -> int:
        return len(self.open_channels()) - 1

    def selected_aid(self, channel: int) -> Optional[bytes]:
        state = self.channels[channel]
        return state.selected if state is not None else None

    def install_applet(self, applet: Applet) -> None:
        if applet.aid in self.applets:
            raise DuplicateAid(f"applet {applet.aid.hex().upper()} already installed")
        self.applets[applet.aid] = applet

    def remove_applet(self, aid: bytes) -> Applet:
        aid = bytes(aid)
        try:
            applet = self.applets.pop(aid)
        except KeyError:
            raise UnknownAid(f"no applet {aid.hex().upper()}") from None
        for state in self.channels:
            if state is not None and state.selected == aid:
                state.selected = None
        return applet

    @property
    def ara(self) -> Optional[AraApplet]:
        applet = self.applets.get(ARA_AID)
        return applet if isinstance(applet, AraApplet) else None

    def process(self, raw: bytes) -> bytes:
        try:
            cmd = parse_command(raw)
        except ApduError:
            return _sw(SW_UNKNOWN)
        if cmd.cla == 0xFF or (cmd.cla & 0xC0) == 0x40:
            # invalid class / further-interindustry channels 4..19 are not provided
            return _sw(SW_NO_CHANNEL if cmd.cla != 0xFF else SW_UNKNOWN)
        # GP proprietary classes 80..83 carry the channel in the same two bits
        channel = cmd.cla & 0x03
        if self.channels[channel] is None:
            return _sw(SW_NO_CHANNEL)
        if cmd.ins == INS_MANAGE_CHANNEL and not cmd.cla & 0x80:
            return self._manage_channel(cmd)
        if is_select_by_aid(cmd) and not cmd.cla & 0x80:
            return self._select(channel, cmd.data)
        selected = self.channels[channel].selected
        applet = self.applets.get(selected) if selected is not None else None
        if applet is None:
            return _sw(SW_UNKNOWN)
        try:
            response = applet.process(cmd)
        except Exception:
            log.exception("applet %r failed on %s", applet, cmd)
            return _sw(SW_UNKNOWN)
        if not isinstance(response, (bytes, bytearray)) or len(response) < 2:
            return _sw(SW_UNKNOWN)
        return bytes(response)

    def _manage_channel(self, cmd: CommandApdu) -> bytes:
        if cmd.p1 == 0x00 and cmd.p2 == 0x00 and cmd.case in (1, 2):
            for n in range(1, NUM_CHANNELS):
                if self.channels[n] is None:
                    self.channels[n] = _Open()
                    return bytes((n,)) + _sw(SW_OK)
            return _sw(SW_NO_CHANNEL)
        if cmd.p1 == 0x80 and cmd.case == 1:
            n = cmd.p2
            if 1 <= n < NUM_CHANNELS and self.channels[n] is not None:
                self.channels[n] = None
                return _sw(SW_OK)
            return _sw(SW_NO_CHANNEL)
        return _sw(SW_UNKNOWN)

    def _select(self, channel: int, aid: bytes) -> bytes:
        applet = self.applets.get(bytes(aid))
        if applet is None:
            return _sw(SW_APPLET_NOT_FOUND)
        self.channels[channel].selected = applet.aid
        return applet.select_response + _sw(SW_OK)


# -- element config file ---------------------------------------------------

APPLET_KINDS = {"echo": EchoApplet}


@dataclass
class ElementConfig:
    atr: bytes = DEFAULT_ATR
    applets: List[str] = field(default_factory=lambda: ["echo"])
    ara_rules: Optional[Path] = None
    card_present: bool = True

    @classmethod
    def load(cls, path: PathLike) -> "ElementConfig":
        p = Path(path)
        values = read_kv(p)
        unknown = set(values) - {"atr", "applets", "ara_rules", "card_present"}
        if unknown:
            raise ConfigError(f"unknown element config keys: {sorted(unknown)}")
        cfg = cls()
        if "atr" in values:
            cfg.atr = from_hex(values["atr"])
        if "applets" in values:
            cfg.applets = parse_list(values["applets"])
            bad = [a for a in cfg.applets if a not in APPLET_KINDS]
            if bad:
                raise ConfigError(f"unknown applet kinds {bad}; known: {sorted(APPLET_KINDS)}")
        if values.get("ara_rules"):
            rules = Path(values["ara_rules"]).expanduser()
            cfg.ara_rules = rules if rules.is_absolute() else p.resolve().parent / rules
        if "card_present" in values:
            cfg.card_present = parse_bool(values["card_present"], "card_present")
        return cfg

    def dump(self) -> str:
        values = {"atr": self.atr.hex().upper(), "applets": ", ".join(self.applets),
                  "card_present": str(self.card_present).lower()}
        if self.ara_rules is not None:
            values["ara_rules"] = str(self.ara_rules)
        return format_kv(values)

    def build(self) -> VirtualSecureElement:
        vse = VirtualSecureElement(self.atr, [APPLET_KINDS[name]() for name in self.applets])
        if self.ara_rules is not None:
            vse.install_applet(AraApplet(ac.load_rule_file(self.ara_rules)))
        return vse

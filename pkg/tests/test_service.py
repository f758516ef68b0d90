import os
import signal
import time

import pytest

from omapisim import errors
from omapisim.access_control import AccessRule, AccessRuleDb, ApduFilter, Policy, WILDCARD
from omapisim.apdu import from_hex
from omapisim.audit import read_audit_file
from omapisim.client import WireClient, read_credentials
from omapisim.discovery import EntryRegistry, write_manifest
from omapisim.exploit import EXPLOIT_NAME, EXPLOIT_SIGNATURE
from omapisim.sandbox import CLIENT_PACKAGE, CLIENT_SIGNATURE, PackageRecord
from omapisim.service import SmartcardService
from omapisim.config import ServiceConfig
from omapisim.terminal import UICC_NAME, UiccTerminal
from omapisim.vse import ECHO_AID, AraApplet, EchoApplet, VirtualSecureElement
from conftest import make_bundle

TERMINALS = "org.simalliance.openmobileapi.service.terminals."


def client_of(svc):
    return svc.sandbox.identity_for(CLIENT_PACKAGE, pid=1, tid=1)


def test_reader_order_by_mode(make_service):
    assert make_service("legacy").reader_names() == [UICC_NAME, EXPLOIT_NAME]


def test_reader_order_none(make_service):
    svc = make_service("none")
    assert svc.reader_names() == [UICC_NAME]
    assert svc.list_readers(client_of(svc)) == [UICC_NAME]


def test_smartcard_gate(make_service):
    svc = make_service("none")
    svc.sandbox.install_package(PackageRecord("org.example.noperm", 20001, b"\x09" * 20))
    stranger = svc.sandbox.identity_for("org.example.noperm")
    with pytest.raises(errors.PermissionDenied):
        svc.list_readers(stranger)
    with pytest.raises(errors.PermissionDenied):
        svc.open_session(stranger, 0)
    # the service's own uid passes without holding the permission
    assert svc.list_readers(svc.identity) == [UICC_NAME]


def test_echo_round_trip_with_ara(make_service, open_element):
    svc = make_service("none", element=open_element)
    me = client_of(svc)
    sid = svc.open_session(me, UICC_NAME)
    cid, select = svc.open_logical_channel(me, sid, ECHO_AID)
    assert select.endswith(b"\x90\x00")
    assert svc.transmit(me, cid, from_hex("00 B0 00 00 02 CA FE")) == from_hex("CA FE 90 00")
    assert svc.open_channel_count(UICC_NAME) == 1
    svc.close_channel(me, cid)
    assert svc.open_channel_count(UICC_NAME) == 0
    svc.close_session(me, sid)
    with pytest.raises(errors.UnknownSession):
        svc.open_logical_channel(me, sid, ECHO_AID)


def test_no_ara_denies_before_any_channel(make_service, echo_element):
    svc = make_service("none", element=echo_element)
    me = client_of(svc)
    sid = svc.open_session(me, 0)
    with pytest.raises(errors.AccessDenied, match=r"\(DeniedNoDb\)"):
        svc.open_logical_channel(me, sid, ECHO_AID)
    assert echo_element.open_channels() == [0]
    assert [e["verdict"] for e in svc.audit.events("enforcer")] == ["DeniedNoDb"]


def test_rules_refetched_each_open(make_service):
    ara = AraApplet(AccessRuleDb((AccessRule(WILDCARD, WILDCARD, Policy.ALLOW),)))
    element = VirtualSecureElement(applets=[EchoApplet(), ara])
    svc = make_service("none", element=element)
    me = client_of(svc)
    sid = svc.open_session(me, 0)
    cid, _ = svc.open_logical_channel(me, sid, ECHO_AID)
    svc.close_channel(me, cid)
    ara.rule_db = AccessRuleDb((AccessRule(ECHO_AID, CLIENT_SIGNATURE, Policy.DENY),))
    with pytest.raises(errors.AccessDenied, match="Denied"):
        svc.open_logical_channel(me, sid, ECHO_AID)


@pytest.mark.parametrize("apdu", [
    "00 70 00 00 01",            # MANAGE CHANNEL open
    "01 70 80 01",               # MANAGE CHANNEL close on another channel
    "00 A4 04 00 05 A0 00 00 01 51",   # SELECT by AID
    "40 B0 00 00 01 00",         # further interindustry class
])
def test_escape_guard(make_service, open_element, apdu):
    svc = make_service("none", element=open_element)
    me = client_of(svc)
    sid = svc.open_session(me, 0)
    cid, _ = svc.open_logical_channel(me, sid, ECHO_AID)
    before = open_element.open_channels()
    with pytest.raises(errors.ChannelEscapeAttempt):
        svc.transmit(me, cid, from_hex(apdu))
    assert open_element.open_channels() == before
    assert not [e for e in svc.audit.events("transmit") if e.get("result") == "forwarded"]


def test_transmit_routes_to_terminal_channel(make_service, open_element):
    svc = make_service("none", element=open_element)
    me = client_of(svc)
    sid = svc.open_session(me, 0)
    cid, _ = svc.open_logical_channel(me, sid, ECHO_AID)
    # the client writes channel 0; the service rewrites it to the real one
    svc.transmit(me, cid, from_hex("00 B0 00 00 01 11"))
    fwd = svc.audit.events("transmit")[-1]
    assert fwd["command"][0] == 0x01


def test_filters(make_service):
    only_read = ApduFilter(from_hex("00 B0 00 00"), from_hex("FF FF 00 00"))
    db = AccessRuleDb((AccessRule(ECHO_AID, WILDCARD, Policy.ALLOW_FILTERED, (only_read,)),))
    element = VirtualSecureElement(applets=[EchoApplet(), AraApplet(db)])
    svc = make_service("none", element=element)
    me = client_of(svc)
    sid = svc.open_session(me, 0)
    cid, _ = svc.open_logical_channel(me, sid, ECHO_AID)
    assert svc.transmit(me, cid, from_hex("00 B0 12 34 01 AA")) == from_hex("AA 90 00")
    with pytest.raises(errors.FilteredOut):
        svc.transmit(me, cid, from_hex("00 D6 00 00 01 AA"))


def test_channel_and_session_limits(make_service, open_element):
    svc = make_service("none", element=open_element, session_limit=2)
    me = client_of(svc)
    sid = svc.open_session(me, 0)
    for _ in range(3):
        svc.open_logical_channel(me, sid, ECHO_AID)
    with pytest.raises(errors.NoChannelAvailable):
        svc.open_logical_channel(me, sid, ECHO_AID)
    svc.open_session(me, 0)
    with pytest.raises(errors.LimitExceeded):
        svc.open_session(me, 0)


def test_session_ownership(make_service, open_element):
    svc = make_service("none", element=open_element)
    me = client_of(svc)
    svc.sandbox.install_package(PackageRecord("org.example.other", 20002, b"\x0a" * 20,
                                              {"org.simalliance.openmobileapi.SMARTCARD"}))
    other = svc.sandbox.identity_for("org.example.other")
    sid = svc.open_session(me, 0)
    cid, _ = svc.open_logical_channel(me, sid, ECHO_AID)
    with pytest.raises(errors.UnknownSession):
        svc.close_session(other, sid)
    with pytest.raises(errors.UnknownChannel):
        svc.transmit(other, cid, from_hex("00 B0 00 00"))


def test_unknown_reader_and_bad_aid(make_service, open_element):
    svc = make_service("none", element=open_element)
    me = client_of(svc)
    with pytest.raises(errors.UnknownReader):
        svc.open_session(me, 5)
    with pytest.raises(errors.UnknownReader):
        svc.open_session(me, "NOPE")
    sid = svc.open_session(me, 0)
    with pytest.raises(errors.BadRequest):
        svc.open_logical_channel(me, sid, b"\xa0")
    cid, _ = svc.open_logical_channel(me, sid, ECHO_AID)
    with pytest.raises(errors.BadRequest):
        svc.transmit(me, cid, b"\x00\xb0")


class _Named(UiccTerminal):
    def __init__(self, context):
        super().__init__(VirtualSecureElement(), "EXTRA01")


def test_update_terminals_add_and_remove(tmp_path):
    root = tmp_path / "plugins"
    root.mkdir()
    reg = EntryRegistry()
    reg.register("ExtraTerminal", _Named)
    cfg = ServiceConfig(loader_mode="legacy", plugin_root=root)
    with SmartcardService(cfg, registry=reg) as svc:
        assert svc.start() == [UICC_NAME]
        write_manifest(root / "extra", TERMINALS + "extra", ["ExtraTerminal"], b"\x03" * 20)
        # not a prefix match: ignored
        write_manifest(root / "zzz", "org.example.extra", ["ExtraTerminal"], b"\x04" * 20)
        assert svc.update_terminals() == [UICC_NAME, "EXTRA01"]
        for p in (root / "extra").iterdir():
            p.unlink()
        (root / "extra").rmdir()
        assert svc.update_terminals() == [UICC_NAME]
        assert svc.audit.events("addon_removed")[0]["reason"] == "package removed"


def test_name_collision_keeps_first(tmp_path):
    root = tmp_path / "plugins"
    reg = EntryRegistry()
    reg.register("ExtraTerminal", _Named)
    write_manifest(root / "a", TERMINALS + "a", ["ExtraTerminal"], b"\x03" * 20)
    write_manifest(root / "b", TERMINALS + "b", ["ExtraTerminal"], b"\x03" * 20)
    with SmartcardService(ServiceConfig(loader_mode="legacy", plugin_root=root), registry=reg) as svc:
        assert svc.start() == [UICC_NAME, "EXTRA01"]
        assert svc.terminal_record("EXTRA01").package == TERMINALS + "a"
        assert svc.audit.events("addon_collision")[0]["package"] == TERMINALS + "b"


def test_allowlist_rejects_before_construction(make_service, tmp_path):
    svc = make_service("legacy", allowlist=frozenset({b"\x00" * 20}))
    assert svc.reader_names() == [UICC_NAME]
    assert svc.rejections == [(svc.rejections[0][0], "SignatureRejected")]
    assert not (tmp_path / "report.txt").exists()
    assert not svc.audit.events("deliver")


def test_allowlist_accepts_listed(make_service):
    svc = make_service("legacy", allowlist=frozenset({EXPLOIT_SIGNATURE}))
    assert svc.reader_names() == [UICC_NAME, EXPLOIT_NAME]


def test_exploit_terminal_cannot_open_channels(make_service):
    svc = make_service("legacy")
    me = client_of(svc)
    sid = svc.open_session(me, EXPLOIT_NAME)
    with pytest.raises(errors.AccessDenied, match="DeniedNoDb"):
        svc.open_logical_channel(me, sid, ECHO_AID)


def test_hardened_remote_terminal_and_crash(make_service, tmp_path):
    svc = make_service("hardened", exploit=False, start=False)
    make_bundle(tmp_path / "plugins", "stall", TERMINALS + "stall")
    assert svc.start() == [UICC_NAME, "STALL01"]
    me = client_of(svc)
    sid = svc.open_session(me, "STALL01")
    cid, select = svc.open_logical_channel(me, sid, ECHO_AID)
    assert svc.transmit(me, cid, from_hex("00 B0 00 00 01 5A")) == from_hex("5A 90 00")
    remote = svc.terminal_record("STALL01").terminal
    os.kill(remote.pid, signal.SIGKILL)
    remote.process.wait(5)
    with pytest.raises(errors.TerminalUnavailable):
        svc.transmit(me, cid, from_hex("00 B0 00 00 01 5A"))
    assert "STALL01" not in svc.reader_names()
    # the session stays but is closed; the UICC still works
    with pytest.raises(errors.TerminalUnavailable):
        svc.open_logical_channel(me, sid, ECHO_AID)
    assert svc.open_session(me, UICC_NAME)
    removed = svc.audit.events("addon_removed")
    assert removed and removed[0]["reason"] == "terminal process died"


def test_wire_server(make_service, open_element, tmp_path):
    svc = make_service("none", element=open_element, serve=True)
    pkg, token = read_credentials(tmp_path / "omapi.sock")
    assert pkg == CLIENT_PACKAGE
    assert oct((tmp_path / "omapi.sock.client").stat().st_mode & 0o777) == "0o600"
    with WireClient(tmp_path / "omapi.sock", pkg, token) as c:
        assert c.uid == 10050
        assert c.list_readers() == [UICC_NAME]
        sid = c.open_session(UICC_NAME)
        cid, _ = c.open_channel(sid, ECHO_AID)
        assert c.transmit(cid, from_hex("00 B0 00 00 01 77")) == from_hex("77 90 00")
        with pytest.raises(errors.ChannelEscapeAttempt):
            c.transmit(cid, from_hex("00 70 00 00 01"))
    # dropping the connection closes its sessions
    deadline = time.monotonic() + 5
    while svc.open_channel_count(UICC_NAME) and time.monotonic() < deadline:
        time.sleep(0.02)
    assert svc.open_channel_count(UICC_NAME) == 0
    with pytest.raises(errors.NotAuthenticated):
        WireClient(tmp_path / "omapi.sock", pkg, b"\x00" * 16)
    with pytest.raises(errors.NotAuthenticated):
        WireClient(tmp_path / "omapi.sock", "org.example.spoof", token)


def test_audit_file_written(make_service, tmp_path):
    make_service("legacy")
    names = read_audit_file(tmp_path / "audit.jsonl", "terminals")
    assert names[0]["names"] == [UICC_NAME, EXPLOIT_NAME]

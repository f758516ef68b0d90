import random

import pytest
from hypothesis import given, strategies as st

from omapisim import apdu
from omapisim.apdu import (BadAidLength, CannotCloseBasicChannel, ChannelOutOfRange, CommandApdu,
                           ExtendedNotSupported, LengthMismatch, ProprietaryClass, ResponseApdu, TooShort,
                           build_manage_channel, build_select, from_hex, get_channel, parse_command,
                           parse_response, serialize_command, serialize_response, set_channel, to_hex)
from oracles import apdu_bytes, apdu_case


def test_parse_case3_select():
    cmd = parse_command(from_hex("00 A4 04 00 02 3F 00"))
    assert (cmd.cla, cmd.ins, cmd.p1, cmd.p2) == (0x00, 0xA4, 0x04, 0x00)
    assert cmd.data == b"\x3f\x00"
    assert cmd.le is None
    assert cmd.case == 3


def test_parse_manage_channel_is_case2():
    cmd = parse_command(from_hex("00 70 00 00 01"))
    assert cmd.ins == 0x70 and cmd.le == 1 and cmd.data == b""
    assert cmd.case == 2


def test_too_short():
    with pytest.raises(TooShort):
        parse_command(from_hex("00 A4 04"))


def test_le_zero_means_256():
    assert parse_command(from_hex("00 B0 00 00 00")).le == 256
    assert serialize_command(CommandApdu(0, 0xB0, 0, 0, le=256)) == from_hex("00 B0 00 00 00")


def test_extended_and_mismatch():
    with pytest.raises(ExtendedNotSupported):
        parse_command(from_hex("00 A4 04 00 00 00 02 3F 00"))
    with pytest.raises(LengthMismatch):
        parse_command(from_hex("00 A4 04 00 05 3F 00"))


def test_serialize_examples():
    assert serialize_command(CommandApdu(0x80, 0xCA, 0xFF, 0x40)) == bytes([0x80, 0xCA, 0xFF, 0x40])
    assert serialize_command(CommandApdu(0, 0xA4, 4, 0, b"\x3f\x00")).endswith(from_hex("02 3F 00"))


def test_response_examples():
    r = parse_response(from_hex("90 00"))
    assert r.data == b"" and r.sw == 0x9000
    assert parse_response(from_hex("6F 00")).sw == 0x6F00
    r = parse_response(from_hex("01 02 90 00"))
    assert r.data == b"\x01\x02" and r.sw == 0x9000
    with pytest.raises(TooShort):
        parse_response(b"\x90")
    assert ResponseApdu.from_sw(0x6A82).to_bytes() == b"\x6a\x82"


def test_set_channel():
    base = CommandApdu(0x00, 0xB0, 0, 0)
    assert set_channel(base, 2).cla == 0x02
    assert set_channel(base, 0).cla == 0x00
    with pytest.raises(ChannelOutOfRange):
        set_channel(base, 4)
    with pytest.raises(ProprietaryClass):
        set_channel(CommandApdu(0x80, 0xCA, 0, 0), 1)


def test_channel_roundtrip_exhaustive():
    # all 4 channels x 64 interindustry class bytes (first-interindustry range 00..3F)
    clas = random.Random(7).sample(range(0x00, 0x80), 64)
    for cla in clas:
        for ch in range(4):
            cmd = set_channel(CommandApdu(cla, 0xB0, 0, 0), ch)
            assert get_channel(cmd) == ch
            assert cmd.cla & 0xFC == cla & 0xFC


def test_build_select():
    ara = from_hex("A0 00 00 01 51 41 43 4C 00")
    assert build_select(ara).to_bytes() == from_hex("00 A4 04 00 09 A0 00 00 01 51 41 43 4C 00 00")
    with pytest.raises(BadAidLength):
        build_select(b"\x01\x02\x03\x04")
    assert build_select(bytes(range(16))).to_bytes()[4] == 0x10
    with pytest.raises(BadAidLength):
        build_select(bytes(17))


def test_build_manage_channel():
    assert build_manage_channel(True).to_bytes() == from_hex("00 70 00 00 01")
    assert build_manage_channel(False, 2).to_bytes() == from_hex("00 70 80 02")
    with pytest.raises(CannotCloseBasicChannel):
        build_manage_channel(False, 0)


def test_hex_helpers():
    assert to_hex(b"\x0a\xbc") == "0ABC"
    assert from_hex("0a:bc") == b"\x0a\xbc"
    with pytest.raises(ValueError):
        from_hex("xyz")


def _random_command(rng):
    data = bytes(rng.randrange(256) for _ in range(rng.choice([0, 0, rng.randrange(1, 256)])))
    le = rng.choice([None, rng.randrange(1, 257), 256])
    return rng.randrange(256), rng.randrange(256), rng.randrange(256), rng.randrange(256), data, le


def test_roundtrip_10000_against_oracle():
    rng = random.Random(20150606)
    failures = 0
    for _ in range(10_000):
        cla, ins, p1, p2, data, le = _random_command(rng)
        cmd = CommandApdu(cla, ins, p1, p2, data, le)
        raw = serialize_command(cmd)
        if raw != apdu_bytes(cla, ins, p1, p2, data, le) or parse_command(raw) != cmd \
                or cmd.case != apdu_case(data, le):
            failures += 1
    assert failures == 0


def test_parse_total_on_short_inputs():
    rng = random.Random(1)
    for n in range(0, 301):
        for _ in range(5):
            raw = bytes(rng.randrange(256) for _ in range(n))
            try:
                cmd = parse_command(raw)
            except apdu.ApduError:
                continue
            assert serialize_command(cmd) == raw


@given(st.binary(min_size=2, max_size=300))
def test_response_roundtrip(raw):
    assert serialize_response(parse_response(raw)) == raw


@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255), st.integers(0, 255),
       st.binary(max_size=255), st.one_of(st.none(), st.integers(1, 256)))
def test_command_roundtrip_property(cla, ins, p1, p2, data, le):
    cmd = CommandApdu(cla, ins, p1, p2, data, le)
    assert parse_command(serialize_command(cmd)) == cmd

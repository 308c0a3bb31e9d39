"""Wire format: golden vectors, round trips, error taxonomy, fuzz."""

from __future__ import annotations

import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caspr import wire
from caspr.wire import (
    Ack,
    BadVersion,
    CodedPacket,
    CoopRequest,
    CoopResponse,
    Ctrl,
    DataPacket,
    FieldOverflow,
    LengthMismatch,
    Nack,
    Truncated,
    UnknownType,
    WireError,
    deserialize,
    serialize,
    wire_size,
)

DATA_DIR = Path(__file__).parent / "data"


def golden(name: str) -> bytes:
    return bytes.fromhex((DATA_DIR / name).read_text().strip())


GOLDEN_MESSAGES = {
    "golden_data_empty.hex": DataPacket(7, 1, 0),
    "golden_data_flagged.hex": DataPacket(2, 3, 0x1234, b"hi", wire.FLAG_SELECTIVE_DUP),
    "golden_nack_one_entry.hex": Nack(5, ((5, 42),), 1000),
    "golden_ack.hex": Ack(5, 41, 2000),
    "golden_cross_coded.hex": CodedPacket(
        True, 9, 0, 2, ((1, 100, 3), (2, 200, 2)), b"\xaa\xbb\xcc", 0x0102030405060708),
    "golden_in_coded.hex": CodedPacket(False, 4, 0, 1, ((6, 10, 1),), b"\xff", 0),
    "golden_coop_req.hex": CoopRequest(((1, 7), (1, 8)), 100),
    "golden_coop_resp.hex": CoopResponse((1, 7), b"OK", 200),
    "golden_coop_resp_negative.hex": CoopResponse((3, 77), None, 500),
    "golden_ctrl_confirm_resp.hex": Ctrl(wire.CTRL_CONFIRM_RESP, 9, 13, 1, 0),
}


@pytest.mark.parametrize("name", sorted(GOLDEN_MESSAGES))
def test_golden_serialize(name):
    assert serialize(GOLDEN_MESSAGES[name]) == golden(name)


@pytest.mark.parametrize("name", sorted(GOLDEN_MESSAGES))
def test_golden_deserialize(name):
    assert deserialize(golden(name)) == GOLDEN_MESSAGES[name]


def test_header_is_32_bytes_for_every_type():
    for name, msg in GOLDEN_MESSAGES.items():
        raw = golden(name)
        assert len(raw) >= 32
        assert raw[0] == wire.VERSION


def test_coded_extension_arithmetic():
    members = tuple((f, 10 + f, 100) for f in range(6))
    msg = CodedPacket(True, 1, 0, 2, members, bytes(100))
    raw = serialize(msg)
    ext_len = int.from_bytes(raw[30:32], "big")
    assert ext_len == 13 + 6 * 18 + 6 * 4 == 145
    assert wire_size(msg) == len(raw) == 32 + 145 + 100


def test_member_ts_default_is_packet_send_time():
    msg = CodedPacket(True, 1, 0, 1, ((3, 9, 40),), b"x", 5000)
    assert msg.member_ts == (5000,)


def test_member_ts_round_trip():
    msg = CodedPacket(True, 8, 1, 2, ((1, 5, 10), (2, 6, 10)), b"pq",
                      send_ts_us=90_000, member_ts=(60_000, 75_500))
    back = deserialize(serialize(msg))
    assert back == msg


def test_member_ts_length_mismatch_rejected():
    msg = CodedPacket(True, 1, 0, 1, ((1, 1, 1), (2, 2, 2)), b"x",
                      send_ts_us=10, member_ts=(5,))
    with pytest.raises(FieldOverflow):
        serialize(msg)


def test_member_ts_after_packet_send_rejected():
    # a member claimed sent after the packet carrying its parity
    msg = CodedPacket(True, 1, 0, 1, ((1, 1, 1),), b"x",
                      send_ts_us=10, member_ts=(11,))
    with pytest.raises(FieldOverflow):
        serialize(msg)


def test_member_ts_offset_past_time_zero_rejected():
    raw = bytearray(serialize(CodedPacket(False, 4, 0, 1, ((6, 10, 1),),
                                          b"\xff", 0)))
    # the lone ts offset sits in the last 4 ext bytes, before the payload
    raw[-5:-1] = (7).to_bytes(4, "big")
    with pytest.raises(FieldOverflow):
        deserialize(bytes(raw))


def test_wire_size_matches_serialize():
    for msg in GOLDEN_MESSAGES.values():
        assert wire_size(msg) == len(serialize(msg))


entry_st = st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
member_st = st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
                      st.integers(0, 2**16 - 1))
ts_st = st.integers(0, 2**64 - 1)

message_st = st.one_of(
    st.builds(DataPacket, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
              ts_st, st.binary(max_size=300), st.integers(0, 3)),
    st.builds(CodedPacket, st.booleans(), st.integers(0, 2**64 - 1),
              st.integers(0, 255), st.integers(0, 255),
              st.lists(member_st, min_size=1, max_size=30).map(tuple),
              st.binary(max_size=300), ts_st),
    st.builds(Nack, st.integers(0, 2**64 - 1),
              st.lists(entry_st, min_size=1, max_size=50).map(tuple), ts_st),
    st.builds(Ack, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), ts_st),
    st.builds(CoopRequest, st.lists(entry_st, min_size=1, max_size=50).map(tuple), ts_st),
    st.builds(CoopResponse, entry_st, st.one_of(st.none(), st.binary(max_size=300)), ts_st),
    st.builds(Ctrl, st.integers(0, 255), st.integers(0, 2**64 - 1),
              st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), ts_st),
)


@settings(max_examples=300, derandomize=True)
@given(message_st)
def test_round_trip(msg):
    raw = serialize(msg)
    assert len(raw) == wire_size(msg)
    back = deserialize(raw)
    if isinstance(msg, CodedPacket) and msg.payload == b"":
        # symbol_len 0 survives; payload identity still holds
        assert back == msg
    else:
        assert back == msg


def test_truncated_header():
    with pytest.raises(Truncated):
        deserialize(b"")
    with pytest.raises(Truncated):
        deserialize(golden("golden_data_empty.hex")[:31])


def test_truncated_body():
    raw = golden("golden_cross_coded.hex")
    with pytest.raises(Truncated):
        deserialize(raw[:-1])


def test_trailing_garbage_rejected():
    raw = golden("golden_data_empty.hex") + b"\x00"
    with pytest.raises(LengthMismatch):
        deserialize(raw)


def test_bad_version():
    raw = bytearray(golden("golden_data_empty.hex"))
    raw[0] = 2
    with pytest.raises(BadVersion):
        deserialize(bytes(raw))


def test_unknown_type():
    raw = bytearray(golden("golden_data_empty.hex"))
    raw[1] = 8
    with pytest.raises(UnknownType):
        deserialize(bytes(raw))


def test_symbol_len_payload_disagreement():
    raw = bytearray(golden("golden_in_coded.hex"))
    # symbol_len field sits after batch_id(8)+parity(1)+num_parity(1)+count(1)
    off = 32 + 8 + 3
    raw[off:off + 2] = (2).to_bytes(2, "big")
    with pytest.raises(LengthMismatch):
        deserialize(bytes(raw))


def test_data_with_extension_rejected():
    raw = bytearray(golden("golden_ctrl_confirm_resp.hex"))
    raw[1] = wire.DATA
    with pytest.raises(LengthMismatch):
        deserialize(bytes(raw))


def test_zero_entries_rejected():
    raw = bytearray(serialize(Nack(1, ((1, 2),), 0)))
    raw[32] = 0  # entry_count now disagrees with ext_len, and is illegal anyway
    with pytest.raises(LengthMismatch):
        deserialize(bytes(raw))


def test_field_overflow_on_serialize():
    with pytest.raises(FieldOverflow):
        serialize(DataPacket(2**64, 0, 0))
    with pytest.raises(FieldOverflow):
        serialize(DataPacket(0, 0, 0, b"x" * 65536))
    with pytest.raises(FieldOverflow):
        serialize(Nack(1, tuple((1, i) for i in range(256)), 0))
    with pytest.raises(FieldOverflow):
        serialize(CodedPacket(True, 0, 256, 2, ((1, 1, 1),), b""))
    with pytest.raises(FieldOverflow):
        serialize(DataPacket(0, 0, -1))


def test_negative_coop_resp_with_payload_rejected():
    raw = bytearray(serialize(CoopResponse((1, 1), b"x")))
    raw[3] |= wire.FLAG_COOP_NEGATIVE
    with pytest.raises(LengthMismatch):
        deserialize(bytes(raw))


def test_fuzz_structured_mutations():
    # flip bytes of valid messages; only WireError subclasses may escape
    rng = random.Random(42)
    corpus = [golden(n) for n in GOLDEN_MESSAGES]
    for _ in range(20000):
        raw = bytearray(rng.choice(corpus))
        for _ in range(rng.randint(1, 4)):
            raw[rng.randrange(len(raw))] = rng.randrange(256)
        if rng.random() < 0.3:
            raw = raw[:rng.randrange(len(raw) + 1)]
        try:
            deserialize(bytes(raw))
        except WireError:
            pass


def test_fuzz_random_bytes():
    rng = random.Random(7)
    for _ in range(20000):
        raw = rng.randbytes(rng.randrange(0, 120))
        try:
            deserialize(raw)
        except WireError:
            pass

import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visric import wire
from visric.geometry import Box2D
from visric.wire import MessageEnvelope, MessageType, PayloadKind

from conftest import U32, U64, payloads, random_envelope

# Golden vectors, assembled by hand from the documented byte layout.
# header: magic c09e | version 01 | type | agent u32 | seq u64 | ts u64 | len u32
GOLDEN = {
    "empty_pad": (
        MessageEnvelope(MessageType.SENSING_INDICATION, 1, 0, 0, bytes.fromhex("0500000000")),
        "c09e" "01" "06" "00000001" "0000000000000000" "0000000000000000" "00000005"
        "05" "00000000",
    ),
    "snr_negative": (
        wire.indication(200, 3, 0x0102030405060708, wire.SnrReport(1, -150, 10_000_000)),
        "c09e" "01" "06" "000000c8" "0000000000000003" "0102030405060708" "00000011"
        "04" "00000001" "ffffff6a" "0000000000989680",
    ),
    "post": (
        wire.indication(100, 47, 9_400_000_000, wire.PostBlockage(1, 45, 1)),
        "c09e" "01" "06" "00000064" "000000000000002f" "0000000230489e00" "00000011"
        "03" "00000001" "000000000000002d" "00000001",
    ),
    "prior": (
        wire.indication(100, 14, 0, wire.PriorBlockage(1, Box2D(10.0, 4.0, 0.5, 0.5), 600, 13, 1)),
        "c09e" "01" "06" "00000064" "000000000000000e" "0000000000000000" "00000035"
        "01" "00000001" "4024000000000000" "4010000000000000" "3fe0000000000000" "3fe0000000000000"
        "00000258" "000000000000000d" "00000001",
    ),
    "control_empty": (
        MessageEnvelope(MessageType.CONTROL_REQUEST, 9, 1, 5, wire.encode_control(wire.ControlRequest(7, 2))),
        "c09e" "01" "05" "00000009" "0000000000000001" "0000000000000005" "00000008"
        "00000007" "00000002",
    ),
}


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_golden_vectors(name):
    env, hexdump = GOLDEN[name]
    raw = bytes.fromhex(hexdump)
    assert wire.encode(env) == raw
    assert wire.decode(raw) == env


def test_empty_pad_is_33_bytes():
    env = wire.indication(1, 0, 0, wire.SyntheticPad(b""))
    raw = wire.encode(env)
    assert len(raw) == 28 + 1 + 4 == wire.PAD_OVERHEAD
    assert wire.decode_sensing(wire.decode(raw).payload) == wire.SyntheticPad(b"")


@pytest.mark.parametrize("size", [33, 34, 49, 1057, 2081])
def test_pad_for_configured_wire_size(size):
    n = wire.pad_len_for_wire_size(size)
    assert len(wire.encode(wire.indication(1, 0, 0, wire.SyntheticPad(bytes(n))))) == size
    assert wire.pad_wire_size(n) == size


def test_pad_wire_size_below_minimum():
    with pytest.raises(ValueError):
        wire.pad_len_for_wire_size(32)


def test_encode_is_deterministic():
    env = GOLDEN["prior"][0]
    assert wire.encode(env) == wire.encode(env)


def test_frame_length_is_header_plus_payload():
    env = MessageEnvelope(MessageType.CONTROL_REQUEST, 1, 2, 3, b"x" * 77)
    assert len(wire.encode(env)) == 28 + 77 == env.wire_size


@pytest.mark.parametrize("kind", list(PayloadKind), ids=lambda k: k.name)
@settings(max_examples=300, deadline=None)
@given(data=st.data())
def test_roundtrip_property(kind, data):
    payload = data.draw(payloads[kind])
    env = wire.indication(data.draw(U32), data.draw(U64), data.draw(U64), payload)
    raw = wire.encode(env)
    back = wire.decode(raw)
    assert back == env
    assert wire.encode(back) == raw
    assert wire.encode_sensing(wire.decode_sensing(back.payload)) == env.payload


@pytest.mark.parametrize("kind", list(PayloadKind), ids=lambda k: k.name)
def test_roundtrip_ten_thousand_per_kind(kind):
    rng = np.random.default_rng(int(kind))
    for _ in range(10_000):
        env, p = random_envelope(kind, rng)
        raw = wire.encode(env)
        back = wire.decode(raw)
        assert back == env
        assert wire.encode_sensing(wire.decode_sensing(back.payload)) == env.payload


# --------------------------------------------------------------------------- errors


def _frame():
    return bytearray(wire.encode(GOLDEN["snr_negative"][0]))


def test_bad_magic():
    raw = _frame()
    raw[0] ^= 0xFF
    with pytest.raises(wire.BadMagic):
        wire.decode(bytes(raw))


def test_unknown_version():
    raw = _frame()
    raw[2] = 2
    with pytest.raises(wire.UnsupportedVersion):
        wire.decode(bytes(raw))


@pytest.mark.parametrize("tag", [0, 9, 0xFF])
def test_unknown_message_type(tag):
    raw = _frame()
    raw[3] = tag
    with pytest.raises(wire.UnknownMessageType):
        wire.decode(bytes(raw))


def test_unknown_payload_kind():
    raw = _frame()
    raw[28] = 0x42
    with pytest.raises(wire.UnknownPayloadKind):
        wire.decode(bytes(raw))
    with pytest.raises(wire.UnknownPayloadKind):
        wire.decode_sensing(bytes(raw[28:]))


@pytest.mark.parametrize("cut", [0, 1, 27, 28, 40, 44])
def test_truncated_reports_missing_bytes(cut):
    raw = bytes(_frame())
    with pytest.raises(wire.Truncated) as info:
        wire.decode(raw[:cut])
    assert info.value.needed > 0
    assert cut + info.value.needed <= len(raw)


def test_trailing_bytes_are_length_mismatch():
    with pytest.raises(wire.LengthMismatch):
        wire.decode(bytes(_frame()) + b"\x00")


def test_payload_length_inconsistent_with_kind():
    # SnrReport body with one extra byte, length field adjusted to match
    body = wire.encode_sensing(wire.SnrReport(1, 2, 3)) + b"\x00"
    env = MessageEnvelope(MessageType.SENSING_INDICATION, 1, 0, 0, body)
    decoded = wire.decode(wire.encode(env))
    with pytest.raises(wire.LengthMismatch):
        wire.decode_sensing(decoded.payload)


def test_error_types_are_distinct():
    kinds = [wire.BadMagic, wire.UnsupportedVersion, wire.UnknownMessageType, wire.UnknownPayloadKind,
             wire.Truncated, wire.LengthMismatch, wire.EncodeError]
    assert len(set(kinds)) == len(kinds)
    assert all(issubclass(k, wire.WireError) for k in kinds)


@pytest.mark.parametrize("field,value", [("agent_id", 2**32), ("seq", 2**64), ("send_timestamp_ns", -1)])
def test_encode_range_errors(field, value):
    kw = dict(msg_type=MessageType.CONTROL_REQUEST, agent_id=1, seq=1, send_timestamp_ns=1)
    kw[field] = value
    with pytest.raises(wire.EncodeError):
        wire.encode(MessageEnvelope(**kw))


def test_payload_over_u32_is_encode_error(monkeypatch):
    monkeypatch.setattr(wire, "MAX_PAYLOAD", 10)
    with pytest.raises(wire.EncodeError):
        wire.encode(MessageEnvelope(MessageType.CONTROL_REQUEST, 1, 1, 1, b"x" * 11))


def test_prior_requires_positive_time_to_block():
    with pytest.raises(ValueError):
        wire.PriorBlockage(1, Box2D(0, 0, 1, 1), 0, 0, 1)
    raw = bytearray(wire.encode_sensing(wire.PriorBlockage(1, Box2D(0, 0, 1, 1), 5, 0, 1)))
    raw[37:41] = b"\x00\x00\x00\x00"
    with pytest.raises(wire.WireError):
        wire.decode_sensing(bytes(raw))


def test_snr_out_of_range_is_encode_error():
    with pytest.raises(wire.EncodeError):
        wire.encode_sensing(wire.SnrReport(1, 2**31, 0))


# --------------------------------------------------------------------------- control plane


def test_subscription_roundtrip_and_wildcards():
    sub = wire.Subscription(4, frozenset({wire.FilterEntry(None, PayloadKind.SNR_REPORT),
                                          wire.FilterEntry(7, None)}), 200)
    back = wire.decode_subscription(wire.encode_subscription(sub), 4)
    assert back == sub
    assert back.matches(1, PayloadKind.SNR_REPORT)
    assert back.matches(7, PayloadKind.BLOCKAGE)
    assert not back.matches(8, PayloadKind.BLOCKAGE)


def test_empty_filter_invalid():
    with pytest.raises(ValueError):
        wire.Subscription(1, frozenset())


def test_control_and_response_roundtrip():
    req = wire.ControlRequest(5, 11, b"\x00\x01beam")
    assert wire.decode_control(wire.encode_control(req)) == req
    ack = wire.ControlAck(11, 5, wire.Status.UNKNOWN_TARGET, b"")
    assert wire.decode_control_ack(wire.encode_control_ack(ack)) == ack
    resp = wire.Response(wire.Status.REJECTED, "duplicate agent_id 7")
    assert wire.decode_response(wire.encode_response(resp)) == resp


def test_decode_body_dispatch():
    seq = wire.Sequencer(3)
    env = seq.envelope(MessageType.SETUP_REQUEST, wire.encode_setup_request(wire.SetupRequest(wire.Role.AGENT)), 0)
    assert wire.decode_body(env) == wire.SetupRequest(wire.Role.AGENT)
    env2 = seq.envelope(MessageType.SUBSCRIPTION_DELETE_REQUEST, b"", 0)
    assert (env.seq, env2.seq) == (0, 1)
    assert wire.decode_body(env2) is None


# --------------------------------------------------------------------------- streaming


def _messages(n, seed=0):
    rng = np.random.default_rng(seed)
    kinds = list(PayloadKind)
    return [random_envelope(kinds[i % len(kinds)], rng)[0] for i in range(n)]


def test_one_message_in_one_byte_chunks():
    env = GOLDEN["prior"][0]
    raw = wire.encode(env)
    assert list(wire.frame_stream(raw[i:i + 1] for i in range(len(raw)))) == [env]


def test_three_messages_in_one_chunk():
    envs = [GOLDEN[k][0] for k in ("prior", "post", "snr_negative")]
    assert list(wire.frame_stream([b"".join(map(wire.encode, envs))])) == envs


def rechunk(data: bytes, rnd: random.Random, max_chunk: int):
    pos = 0
    while pos < len(data):
        n = rnd.randint(0, max_chunk)
        yield data[pos:pos + n]
        pos += n


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 30), max_chunk=st.integers(1, 300))
def test_random_rechunking_preserves_sequence(seed, n, max_chunk):
    envs = _messages(n, seed)
    data = b"".join(map(wire.encode, envs))
    assert list(wire.frame_stream(rechunk(data, random.Random(seed), max_chunk))) == envs


def test_stream_error_poisons_decoder():
    dec = wire.FrameDecoder()
    good = wire.encode(GOLDEN["post"][0])
    bad = b"\x00\x00" + good[2:]
    assert dec.feed(good) == [GOLDEN["post"][0]]
    with pytest.raises(wire.BadMagic):
        dec.feed(bad)
    with pytest.raises(wire.BadMagic):
        dec.feed(good)


def test_stream_ending_mid_frame():
    raw = wire.encode(GOLDEN["post"][0])
    with pytest.raises(wire.Truncated):
        list(wire.frame_stream([raw, raw[:10]]))


def test_header_struct_layout():
    assert wire.HEADER_SIZE == 28
    assert struct.calcsize(">2sBBIQQI") == 28

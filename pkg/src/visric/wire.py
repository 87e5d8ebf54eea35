"""Binary wire format for the agent-to-broker and xApp-to-broker links.

Every message is one frame (all integers big-endian)::

    offset size field
    0      2    magic 0xC0 0x9E
    2      1    version (1)
    3      1    msg_type
    4      4    agent_id        sender id (agent or xApp)
    8      8    seq             per-sender, per-connection, strictly increasing
    16     8    send_timestamp_ns
    24     4    payload_len
    28     n    payload

The payload of a SensingIndication starts with a one-byte kind tag followed by
the kind's fixed layout (see ``docs/wire_format.md``). Decoding never guesses:
every malformed input raises a specific :class:`WireError` subclass.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

from .geometry import Box2D

MAGIC = b"\xc0\x9e"
VERSION = 1
HEADER = struct.Struct(">2sBBIQQI")
HEADER_SIZE = HEADER.size  # 28
MAX_PAYLOAD = 0xFFFFFFFF

U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF
WILDCARD_AGENT = U32_MAX
WILDCARD_KIND = 0xFF


class MessageType(enum.IntEnum):
    SETUP_REQUEST = 1
    SETUP_RESPONSE = 2
    SUBSCRIPTION_REQUEST = 3
    SUBSCRIPTION_DELETE_REQUEST = 4
    CONTROL_REQUEST = 5
    SENSING_INDICATION = 6
    # Replies that the request/ack semantics need but the core list omits.
    SUBSCRIPTION_RESPONSE = 7
    CONTROL_ACK = 8


class PayloadKind(enum.IntEnum):
    PRIOR_BLOCKAGE = 1
    BLOCKAGE = 2
    POST_BLOCKAGE = 3
    SNR_REPORT = 4
    SYNTHETIC_PAD = 5


class Role(enum.IntEnum):
    AGENT = 0
    XAPP = 1


class Status(enum.IntEnum):
    OK = 0
    REJECTED = 1
    UNKNOWN_TARGET = 2
    FAILED = 3


class WireError(ValueError):
    """Base class for all decoding and encoding failures."""


class EncodeError(WireError):
    pass


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class UnknownMessageType(WireError):
    pass


class UnknownPayloadKind(WireError):
    pass


class Truncated(WireError):
    """The buffer ends before the frame does; more bytes would fix it."""

    def __init__(self, message: str, needed: int):
        super().__init__(message)
        self.needed = needed


class LengthMismatch(WireError):
    pass


# --------------------------------------------------------------------------- envelope


@dataclass(frozen=True)
class MessageEnvelope:
    msg_type: MessageType
    agent_id: int
    seq: int
    send_timestamp_ns: int
    payload: bytes = b""
    version: int = VERSION

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    @property
    def kind(self) -> PayloadKind | None:
        """Payload kind of a SensingIndication, else None."""
        if self.msg_type != MessageType.SENSING_INDICATION:
            return None
        return PayloadKind(self.payload[0])


def _check_uint(name: str, value: int, limit: int) -> None:
    if not 0 <= value <= limit:
        raise EncodeError(f"{name}={value} out of range [0, {limit}]")


def encode(msg: MessageEnvelope) -> bytes:
    """Serialize one envelope to its frame bytes."""
    _check_uint("agent_id", msg.agent_id, U32_MAX)
    _check_uint("seq", msg.seq, U64_MAX)
    _check_uint("send_timestamp_ns", msg.send_timestamp_ns, U64_MAX)
    _check_uint("version", msg.version, 0xFF)
    if len(msg.payload) > MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(msg.payload)} bytes exceeds 2^32-1")
    header = HEADER.pack(
        MAGIC, msg.version, int(msg.msg_type), msg.agent_id, msg.seq,
        msg.send_timestamp_ns, len(msg.payload),
    )
    return header + bytes(msg.payload)


def _parse_header(buf) -> tuple[int, int, int, int, int, int]:
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(buf)}", HEADER_SIZE - len(buf))
    magic, version, mtype, agent_id, seq, ts, plen = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    try:
        MessageType(mtype)
    except ValueError:
        raise UnknownMessageType(f"unknown message type {mtype}") from None
    return version, mtype, agent_id, seq, ts, plen


def decode_frame(buf, offset: int = 0) -> tuple[MessageEnvelope, int]:
    """Decode the frame starting at ``offset``; return it and the bytes consumed."""
    view = memoryview(buf)[offset:]
    version, mtype, agent_id, seq, ts, plen = _parse_header(view)
    end = HEADER_SIZE + plen
    if len(view) < end:
        raise Truncated(f"frame needs {end} bytes, have {len(view)}", end - len(view))
    payload = bytes(view[HEADER_SIZE:end])
    if mtype == MessageType.SENSING_INDICATION:
        if not payload:
            raise LengthMismatch("sensing indication with empty payload")
        if payload[0] not in _KIND_VALUES:
            raise UnknownPayloadKind(f"unknown payload kind {payload[0]}")
    env = MessageEnvelope(MessageType(mtype), agent_id, seq, ts, payload, version)
    return env, end


def decode(data) -> MessageEnvelope:
    """Decode a buffer that must hold exactly one frame."""
    env, used = decode_frame(data)
    if used != len(data):
        raise LengthMismatch(f"{len(data) - used} trailing bytes after frame")
    return env


class FrameDecoder:
    """Incremental frame reassembly for one connection.

    Feed arbitrary chunks; complete frames come out in order. The first decode
    error poisons the decoder: it is re-raised on every later feed.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self.error: WireError | None = None

    def feed(self, chunk: bytes) -> list[MessageEnvelope]:
        if self.error is not None:
            raise self.error
        self._buf += chunk
        out: list[MessageEnvelope] = []
        pos = 0
        try:
            while True:
                try:
                    env, used = decode_frame(self._buf, pos)
                except Truncated:
                    break
                out.append(env)
                pos += used
        except WireError as exc:
            self.error = exc
            raise
        finally:
            del self._buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)


def frame_stream(chunks: Iterable[bytes]) -> Iterator[MessageEnvelope]:
    """Yield the envelopes carried by an ordered sequence of byte chunks."""
    dec = FrameDecoder()
    for chunk in chunks:
        yield from dec.feed(chunk)
    if dec.buffered:
        raise Truncated(f"stream ended inside a frame ({dec.buffered} bytes pending)", 1)


# --------------------------------------------------------------------------- sensing payloads

_BOX = struct.Struct(">dddd")
_PRIOR = struct.Struct(">BI32sIQI")
_BLOCK = struct.Struct(">BI32sQI")
_POST = struct.Struct(">BIQI")
_SNR = struct.Struct(">BIiQ")
_PAD_HEAD = struct.Struct(">BI")
PAD_OVERHEAD = HEADER_SIZE + _PAD_HEAD.size  # 33
_KIND_VALUES = frozenset(int(k) for k in PayloadKind)


def _pack_box(b: Box2D) -> bytes:
    return _BOX.pack(b.cx, b.cy, b.hx, b.hy)


def _unpack_box(raw: bytes) -> Box2D:
    try:
        return Box2D(*_BOX.unpack(raw))
    except ValueError as exc:
        raise WireError(f"invalid box: {exc}") from None


@dataclass(frozen=True)
class PriorBlockage:
    obstacle_id: int
    box: Box2D
    time_to_block_ms: int
    frame_index: int
    ue_id: int
    kind = PayloadKind.PRIOR_BLOCKAGE

    def __post_init__(self) -> None:
        if self.time_to_block_ms <= 0:
            raise ValueError("time_to_block_ms must be positive")


@dataclass(frozen=True)
class Blockage:
    obstacle_id: int
    box: Box2D
    frame_index: int
    ue_id: int
    kind = PayloadKind.BLOCKAGE


@dataclass(frozen=True)
class PostBlockage:
    obstacle_id: int
    frame_index: int
    ue_id: int
    kind = PayloadKind.POST_BLOCKAGE


@dataclass(frozen=True)
class SnrReport:
    ue_id: int
    snr_centi_db: int
    # Scene-relative sample time; the fusion grid is built from it.
    sample_time_ns: int
    kind = PayloadKind.SNR_REPORT

    @property
    def snr_db(self) -> float:
        return self.snr_centi_db / 100.0


@dataclass(frozen=True)
class SyntheticPad:
    pad: bytes
    kind = PayloadKind.SYNTHETIC_PAD


SensingPayload = Union[PriorBlockage, Blockage, PostBlockage, SnrReport, SyntheticPad]


def encode_sensing(p: SensingPayload) -> bytes:
    try:
        if isinstance(p, PriorBlockage):
            return _PRIOR.pack(p.kind, p.obstacle_id, _pack_box(p.box), p.time_to_block_ms,
                               p.frame_index, p.ue_id)
        if isinstance(p, Blockage):
            return _BLOCK.pack(p.kind, p.obstacle_id, _pack_box(p.box), p.frame_index, p.ue_id)
        if isinstance(p, PostBlockage):
            return _POST.pack(p.kind, p.obstacle_id, p.frame_index, p.ue_id)
        if isinstance(p, SnrReport):
            return _SNR.pack(p.kind, p.ue_id, p.snr_centi_db, p.sample_time_ns)
        if isinstance(p, SyntheticPad):
            if len(p.pad) > MAX_PAYLOAD - _PAD_HEAD.size:
                raise EncodeError("pad too long")
            return _PAD_HEAD.pack(p.kind, len(p.pad)) + bytes(p.pad)
    except struct.error as exc:
        raise EncodeError(str(exc)) from None
    raise EncodeError(f"not a sensing payload: {type(p).__name__}")


def _expect_len(raw: bytes, st: struct.Struct, what: str) -> None:
    if len(raw) < st.size:
        raise Truncated(f"{what} payload needs {st.size} bytes, have {len(raw)}", st.size - len(raw))
    if len(raw) > st.size:
        raise LengthMismatch(f"{what} payload has {len(raw) - st.size} trailing bytes")


def decode_sensing(raw: bytes) -> SensingPayload:
    if not raw:
        raise Truncated("empty sensing payload", 1)
    tag = raw[0]
    if tag == PayloadKind.PRIOR_BLOCKAGE:
        _expect_len(raw, _PRIOR, "PriorBlockage")
        _, oid, box, ttb, frame, ue = _PRIOR.unpack(raw)
        if ttb == 0:
            raise WireError("PriorBlockage with zero time_to_block_ms")
        return PriorBlockage(oid, _unpack_box(box), ttb, frame, ue)
    if tag == PayloadKind.BLOCKAGE:
        _expect_len(raw, _BLOCK, "Blockage")
        _, oid, box, frame, ue = _BLOCK.unpack(raw)
        return Blockage(oid, _unpack_box(box), frame, ue)
    if tag == PayloadKind.POST_BLOCKAGE:
        _expect_len(raw, _POST, "PostBlockage")
        _, oid, frame, ue = _POST.unpack(raw)
        return PostBlockage(oid, frame, ue)
    if tag == PayloadKind.SNR_REPORT:
        _expect_len(raw, _SNR, "SnrReport")
        _, ue, snr, t = _SNR.unpack(raw)
        return SnrReport(ue, snr, t)
    if tag == PayloadKind.SYNTHETIC_PAD:
        if len(raw) < _PAD_HEAD.size:
            raise Truncated("SyntheticPad header truncated", _PAD_HEAD.size - len(raw))
        _, n = _PAD_HEAD.unpack_from(raw)
        body = raw[_PAD_HEAD.size:]
        if len(body) < n:
            raise Truncated(f"pad declares {n} bytes, have {len(body)}", n - len(body))
        if len(body) > n:
            raise LengthMismatch(f"pad declares {n} bytes, have {len(body)}")
        return SyntheticPad(bytes(body))
    raise UnknownPayloadKind(f"unknown payload kind {tag}")


def pad_wire_size(pad_len: int) -> int:
    """On-wire size of a SyntheticPad indication carrying ``pad_len`` bytes."""
    return PAD_OVERHEAD + pad_len


def pad_len_for_wire_size(size: int) -> int:
    """Pad length giving an on-wire envelope of exactly ``size`` bytes (size >= 33)."""
    if size < PAD_OVERHEAD:
        raise ValueError(f"wire size must be >= {PAD_OVERHEAD}, got {size}")
    return size - PAD_OVERHEAD


# --------------------------------------------------------------------------- control plane


@dataclass(frozen=True)
class SetupRequest:
    role: Role


@dataclass(frozen=True)
class Response:
    """Body of SetupResponse and SubscriptionResponse messages."""

    status: Status
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


@dataclass(frozen=True)
class FilterEntry:
    """One subscription filter term; ``None`` is a wildcard."""

    agent_id: int | None = None
    kind: PayloadKind | None = None


@dataclass(frozen=True)
class Subscription:
    xapp_id: int
    filter: frozenset[FilterEntry]
    report_interval_hint_ms: int = 0

    def __post_init__(self) -> None:
        if not self.filter:
            raise ValueError("subscription filter must not be empty")

    def matches(self, agent_id: int, kind: PayloadKind) -> bool:
        return any(
            (f.agent_id is None or f.agent_id == agent_id) and (f.kind is None or f.kind == kind)
            for f in self.filter
        )


@dataclass(frozen=True)
class ControlRequest:
    target_agent: int
    request_id: int
    body: bytes = b""


@dataclass(frozen=True)
class ControlAck:
    request_id: int
    target_agent: int
    status: Status
    body: bytes = b""

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


_ROLE = struct.Struct(">B")
_RESP = struct.Struct(">BH")
_SUB_HEAD = struct.Struct(">IH")
_SUB_ENTRY = struct.Struct(">IB")
_CTRL = struct.Struct(">II")
_ACK = struct.Struct(">IIB")


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise WireError(f"invalid {cls.__name__} value {value}") from None


def encode_setup_request(r: SetupRequest) -> bytes:
    return _ROLE.pack(int(r.role))


def decode_setup_request(raw: bytes) -> SetupRequest:
    _expect_len(raw, _ROLE, "SetupRequest")
    return SetupRequest(_enum(Role, raw[0]))


def encode_response(r: Response) -> bytes:
    reason = r.reason.encode("utf-8")
    if len(reason) > 0xFFFF:
        raise EncodeError("reason too long")
    return _RESP.pack(int(r.status), len(reason)) + reason


def decode_response(raw: bytes) -> Response:
    if len(raw) < _RESP.size:
        raise Truncated("response truncated", _RESP.size - len(raw))
    status, n = _RESP.unpack_from(raw)
    if len(raw) != _RESP.size + n:
        raise LengthMismatch("response reason length mismatch")
    return Response(_enum(Status, status), raw[_RESP.size:].decode("utf-8"))


def encode_subscription(s: Subscription) -> bytes:
    entries = sorted(
        (WILDCARD_AGENT if f.agent_id is None else f.agent_id,
         WILDCARD_KIND if f.kind is None else int(f.kind))
        for f in s.filter
    )
    if len(entries) > 0xFFFF:
        raise EncodeError("too many filter entries")
    out = [_SUB_HEAD.pack(s.report_interval_hint_ms, len(entries))]
    out += [_SUB_ENTRY.pack(a, k) for a, k in entries]
    return b"".join(out)


def decode_subscription(raw: bytes, xapp_id: int) -> Subscription:
    if len(raw) < _SUB_HEAD.size:
        raise Truncated("subscription truncated", _SUB_HEAD.size - len(raw))
    hint, n = _SUB_HEAD.unpack_from(raw)
    if len(raw) != _SUB_HEAD.size + n * _SUB_ENTRY.size:
        raise LengthMismatch("subscription entry count mismatch")
    entries = set()
    for i in range(n):
        a, k = _SUB_ENTRY.unpack_from(raw, _SUB_HEAD.size + i * _SUB_ENTRY.size)
        kind = None if k == WILDCARD_KIND else PayloadKind(k) if k in _KIND_VALUES else None
        if k != WILDCARD_KIND and kind is None:
            raise UnknownPayloadKind(f"unknown payload kind {k} in filter")
        entries.add(FilterEntry(None if a == WILDCARD_AGENT else a, kind))
    return Subscription(xapp_id, frozenset(entries), hint)


def encode_control(c: ControlRequest) -> bytes:
    return _CTRL.pack(c.target_agent, c.request_id) + bytes(c.body)


def decode_control(raw: bytes) -> ControlRequest:
    if len(raw) < _CTRL.size:
        raise Truncated("control request truncated", _CTRL.size - len(raw))
    target, rid = _CTRL.unpack_from(raw)
    return ControlRequest(target, rid, bytes(raw[_CTRL.size:]))


def encode_control_ack(a: ControlAck) -> bytes:
    return _ACK.pack(a.request_id, a.target_agent, int(a.status)) + bytes(a.body)


def decode_control_ack(raw: bytes) -> ControlAck:
    if len(raw) < _ACK.size:
        raise Truncated("control ack truncated", _ACK.size - len(raw))
    rid, target, status = _ACK.unpack_from(raw)
    return ControlAck(rid, target, _enum(Status, status), bytes(raw[_ACK.size:]))


def decode_body(env: MessageEnvelope):
    """Decode the typed body of any envelope."""
    t = env.msg_type
    if t == MessageType.SENSING_INDICATION:
        return decode_sensing(env.payload)
    if t == MessageType.SETUP_REQUEST:
        return decode_setup_request(env.payload)
    if t in (MessageType.SETUP_RESPONSE, MessageType.SUBSCRIPTION_RESPONSE):
        return decode_response(env.payload)
    if t == MessageType.SUBSCRIPTION_REQUEST:
        return decode_subscription(env.payload, env.agent_id)
    if t == MessageType.SUBSCRIPTION_DELETE_REQUEST:
        if env.payload:
            raise LengthMismatch("delete request carries no body")
        return None
    if t == MessageType.CONTROL_REQUEST:
        return decode_control(env.payload)
    if t == MessageType.CONTROL_ACK:
        return decode_control_ack(env.payload)
    raise UnknownMessageType(f"unknown message type {t}")


def indication(agent_id: int, seq: int, send_timestamp_ns: int, payload: SensingPayload) -> MessageEnvelope:
    return MessageEnvelope(MessageType.SENSING_INDICATION, agent_id, seq, send_timestamp_ns,
                           encode_sensing(payload))


@dataclass
class Sequencer:
    """Per-connection sequence counter for one sender."""

    agent_id: int
    next_seq: int = field(default=0)

    def envelope(self, msg_type: MessageType, payload: bytes, send_timestamp_ns: int) -> MessageEnvelope:
        env = MessageEnvelope(msg_type, self.agent_id, self.next_seq, send_timestamp_ns, payload)
        self.next_seq += 1
        return env

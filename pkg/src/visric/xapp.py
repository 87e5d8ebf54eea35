"""xApp client session and the vision-aided fusion logic.

A session keeps one reader thread on its broker connection. Indications are
appended to ``session.records`` as ``(recv_ns, envelope)`` pairs, stamped when
their bytes arrive; replies (subscription and control acks) are handed to the
request that is waiting for them.
"""

from __future__ import annotations

import csv
import io
import json
import queue
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from . import wire
from .wire import FilterEntry, MessageType, PayloadKind, Role, Status

Endpoint = tuple[str, int]

CVF_KINDS = (PayloadKind.PRIOR_BLOCKAGE, PayloadKind.BLOCKAGE, PayloadKind.POST_BLOCKAGE)
ALL_SENSING = frozenset({FilterEntry(None, None)})
KIND_NAMES = {
    PayloadKind.PRIOR_BLOCKAGE: "PriorBlockage",
    PayloadKind.BLOCKAGE: "Blockage",
    PayloadKind.POST_BLOCKAGE: "PostBlockage",
    PayloadKind.SNR_REPORT: "SnrReport",
    PayloadKind.SYNTHETIC_PAD: "SyntheticPad",
}


class SessionError(ConnectionError):
    pass


class SubscriptionError(SessionError):
    pass


def kinds_filter(kinds: Iterable[PayloadKind], agent_id: int | None = None) -> frozenset[FilterEntry]:
    return frozenset(FilterEntry(agent_id, k) for k in kinds)


class XAppSession:
    def __init__(self, endpoint: Endpoint, xapp_id: int, timeout_s: float = 5.0,
                 keep_envelopes: bool = True):
        self.xapp_id = xapp_id
        self.timeout_s = timeout_s
        self.keep_envelopes = keep_envelopes
        self.seq = wire.Sequencer(xapp_id)
        self.records: list[tuple[int, wire.MessageEnvelope]] = []
        # compact (agent_id, seq, send_ns, recv_ns) rows for latency work
        self.latency_rows: list[tuple[int, int, int, int]] = []
        self.received = 0
        self._replies: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self.error: BaseException | None = None
        self._rid = 0
        self.sock = socket.create_connection(endpoint, timeout=timeout_s)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(None)
        self._reader = threading.Thread(target=self._read_loop, name=f"xapp-{xapp_id}", daemon=True)
        self._reader.start()
        self._send(MessageType.SETUP_REQUEST, wire.encode_setup_request(wire.SetupRequest(Role.XAPP)))
        r = wire.decode_response(self._reply(MessageType.SETUP_RESPONSE).payload)
        if not r.ok:
            self.close()
            raise SessionError(f"setup rejected: {r.reason}")

    # plumbing

    def _send(self, msg_type: MessageType, payload: bytes) -> None:
        with self._lock:
            env = self.seq.envelope(msg_type, payload, time.monotonic_ns())
            self.sock.sendall(wire.encode(env))

    def _reply(self, msg_type: MessageType) -> wire.MessageEnvelope:
        try:
            env = self._replies.get(timeout=self.timeout_s)
        except queue.Empty:
            raise SessionError(f"no {msg_type.name} within {self.timeout_s}s") from None
        if env is None:
            raise SessionError(f"connection closed while waiting for {msg_type.name}")
        if env.msg_type != msg_type:
            raise SessionError(f"expected {msg_type.name}, got {env.msg_type.name}")
        return env

    def _read_loop(self) -> None:
        dec = wire.FrameDecoder()
        rows = self.latency_rows
        recs = self.records
        try:
            while True:
                data = self.sock.recv(1 << 18)
                recv_ns = time.monotonic_ns()
                if not data:
                    break
                for env in dec.feed(data):
                    if env.msg_type == MessageType.SENSING_INDICATION:
                        rows.append((env.agent_id, env.seq, env.send_timestamp_ns, recv_ns))
                        if self.keep_envelopes:
                            recs.append((recv_ns, env))
                        self.received += 1
                    else:
                        self._replies.put(env)
        except OSError as exc:
            if not self._closed.is_set():
                self.error = exc
        except wire.WireError as exc:
            self.error = exc
        finally:
            self._replies.put(None)

    # E42-style requests

    def subscribe(self, filters: Iterable[FilterEntry], report_interval_hint_ms: int = 0) -> wire.Response:
        try:
            sub = wire.Subscription(self.xapp_id, frozenset(filters), report_interval_hint_ms)
        except ValueError as exc:
            raise SubscriptionError(str(exc)) from None
        self._send(MessageType.SUBSCRIPTION_REQUEST, wire.encode_subscription(sub))
        r = wire.decode_response(self._reply(MessageType.SUBSCRIPTION_RESPONSE).payload)
        if not r.ok:
            raise SubscriptionError(r.reason)
        return r

    def unsubscribe(self) -> wire.Response:
        self._send(MessageType.SUBSCRIPTION_DELETE_REQUEST, b"")
        return wire.decode_response(self._reply(MessageType.SUBSCRIPTION_RESPONSE).payload)

    def control(self, target_agent: int, body: bytes = b"") -> wire.ControlAck:
        self._rid += 1
        req = wire.ControlRequest(target_agent, self._rid, body)
        self._send(MessageType.CONTROL_REQUEST, wire.encode_control(req))
        return wire.decode_control_ack(self._reply(MessageType.CONTROL_ACK).payload)

    # waiting

    def wait_for(self, count: int, timeout_s: float = 10.0, idle_s: float | None = None) -> bool:
        """Block until ``count`` indications arrived; False on timeout or idle gap."""
        deadline = time.monotonic() + timeout_s
        last, last_change = self.received, time.monotonic()
        while self.received < count:
            t = time.monotonic()
            if t > deadline or not self._reader.is_alive():
                return False
            if self.received != last:
                last, last_change = self.received, t
            elif idle_s is not None and t - last_change > idle_s:
                return False
            time.sleep(0.002)
        return True

    def close(self) -> None:
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=2.0)

    def __enter__(self) -> "XAppSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect_and_subscribe(broker_endpoint: Endpoint, filters: Iterable[FilterEntry],
                          xapp_id: int = 1, **kwargs) -> XAppSession:
    session = XAppSession(broker_endpoint, xapp_id, **kwargs)
    try:
        session.subscribe(filters)
    except BaseException:
        session.close()
        raise
    return session


# --------------------------------------------------------------------------- fusion


@dataclass(frozen=True)
class TimelineRecord:
    recv_time_ns: int
    send_time_ns: int
    source: str  # "cvf" | "radio"
    kind: str
    interval_index: int
    value: float | None = None  # SNR in dB for radio records
    frame_index: int | None = None
    obstacle_id: int | None = None
    time_to_block_ms: int | None = None


@dataclass(frozen=True)
class IntervalRecord:
    interval_index: int
    t_start_s: float
    mean_snr_db: float | None
    n_samples: int
    cvf_kind: str | None


@dataclass
class FusedTimeline:
    interval_ms: int
    fps: int
    records: list[TimelineRecord] = field(default_factory=list)
    intervals: list[IntervalRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["interval_index", "t_start_s", "mean_snr_db", "n_samples", "cvf_kind"])
        for iv in self.intervals:
            w.writerow([iv.interval_index, f"{iv.t_start_s:.3f}",
                        "" if iv.mean_snr_db is None else f"{iv.mean_snr_db:.4f}",
                        iv.n_samples, iv.cvf_kind or "none"])
        return buf.getvalue()

    def cvf_events_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_index", "time_s", "obstacle_id", "kind", "time_to_block_ms"])
        for r in self.records:
            if r.source != "cvf":
                continue
            w.writerow([r.frame_index, f"{r.frame_index / self.fps:.3f}", r.obstacle_id, r.kind,
                        "" if r.time_to_block_ms is None else r.time_to_block_ms])
        return buf.getvalue()

    def kinds(self) -> list[str]:
        return [r.kind for r in self.records if r.source == "cvf"]


def fuse(indications: Iterable[tuple[int, wire.MessageEnvelope]], fps: int = 5,
         interval_ms: int = 200) -> FusedTimeline:
    """Bucket SNR samples and CVF events onto the frame-aligned interval grid.

    Both streams are placed by their scene-time content (SNR sample time, CVF
    frame index), so transport jitter never moves a message between intervals.
    Within an interval the CVF kind of the latest frame wins.
    """
    interval_ns = interval_ms * 1_000_000
    frame_ns = 1_000_000_000 // fps
    recs: list[TimelineRecord] = []
    for recv_ns, env in indications:
        if env.msg_type != MessageType.SENSING_INDICATION:
            continue
        p = wire.decode_sensing(env.payload)
        if isinstance(p, wire.SnrReport):
            recs.append(TimelineRecord(recv_ns, env.send_timestamp_ns, "radio", "SnrReport",
                                       p.sample_time_ns // interval_ns, p.snr_db))
        elif isinstance(p, (wire.PriorBlockage, wire.Blockage, wire.PostBlockage)):
            recs.append(TimelineRecord(
                recv_ns, env.send_timestamp_ns, "cvf", KIND_NAMES[p.kind],
                p.frame_index * frame_ns // interval_ns, None, p.frame_index, p.obstacle_id,
                getattr(p, "time_to_block_ms", None)))
    recs.sort(key=lambda r: (r.recv_time_ns, r.send_time_ns))
    sums: dict[int, list] = {}
    latest: dict[int, tuple[int, str]] = {}
    for r in recs:
        if r.source == "radio":
            s = sums.setdefault(r.interval_index, [0.0, 0])
            s[0] += r.value
            s[1] += 1
        else:
            prev = latest.get(r.interval_index)
            if prev is None or r.frame_index >= prev[0]:
                latest[r.interval_index] = (r.frame_index, r.kind)
    idx = set(sums) | set(latest)
    intervals = []
    if idx:
        for i in range(0, max(idx) + 1):
            s = sums.get(i)
            intervals.append(IntervalRecord(
                i, i * interval_ms / 1000.0,
                None if s is None else s[0] / s[1], 0 if s is None else s[1],
                latest[i][1] if i in latest else None))
    return FusedTimeline(interval_ms, fps, recs, intervals)


@dataclass
class TransitionLog:
    los_lost_time_ns: int | None = None
    los_return_time_ns: int | None = None
    anticipation_ms: float | None = None
    # the same transitions on the scene-time interval grid
    los_lost_interval: int | None = None
    los_return_interval: int | None = None
    anticipation_scene_ms: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def normalized(self, interval_ms: int = 200) -> "TransitionLog":
        """Replace receive times by scene-grid times so the log is reproducible."""
        def grid(i):
            return None if i is None else i * interval_ms * 1_000_000
        return TransitionLog(grid(self.los_lost_interval), grid(self.los_return_interval),
                             self.anticipation_scene_ms, self.los_lost_interval,
                             self.los_return_interval, self.anticipation_scene_ms)


def detect_transitions(timeline: FusedTimeline) -> TransitionLog:
    cvf = [r for r in timeline.records if r.source == "cvf"]
    log = TransitionLog()
    lost = next((r for r in cvf if r.kind == "Blockage"), None)
    if lost is None:
        return log
    log.los_lost_time_ns = lost.recv_time_ns
    log.los_lost_interval = lost.interval_index
    ret = next((r for r in cvf if r.kind == "PostBlockage" and r.recv_time_ns >= lost.recv_time_ns
                and r.frame_index > lost.frame_index), None)
    if ret is not None:
        log.los_return_time_ns = ret.recv_time_ns
        log.los_return_interval = ret.interval_index
    prior = next((r for r in cvf if r.kind == "PriorBlockage"), None)
    if prior is not None and prior.frame_index < lost.frame_index:
        log.anticipation_ms = max(0.0, (lost.recv_time_ns - prior.recv_time_ns) / 1e6)
        log.anticipation_scene_ms = (lost.frame_index - prior.frame_index) * 1000.0 / timeline.fps
    return log


def phase_means(timeline: FusedTimeline) -> dict[str, float | None]:
    """Mean SNR over pre-blockage, blockage and post-blockage intervals.

    Pre-blockage covers the intervals before the first Blockage interval that
    carry SNR samples; post-blockage covers intervals labelled PostBlockage.
    """
    ivs = [iv for iv in timeline.intervals if iv.n_samples]
    first_block = next((iv.interval_index for iv in ivs if iv.cvf_kind == "Blockage"), None)

    def mean(sel):
        n = sum(iv.n_samples for iv in sel)
        return None if n == 0 else sum(iv.mean_snr_db * iv.n_samples for iv in sel) / n

    pre = [iv for iv in ivs if first_block is None or iv.interval_index < first_block]
    prior = [iv for iv in pre if iv.cvf_kind == "PriorBlockage"]
    return {
        "pre": mean(pre),
        "prior": mean(prior),
        "blockage": mean([iv for iv in ivs if iv.cvf_kind == "Blockage"]),
        "post": mean([iv for iv in ivs if iv.cvf_kind == "PostBlockage"]),
    }


def record_session(endpoint: Endpoint, xapp_id: int, filters, expected: int | None = None,
                   timeout_s: float = 60.0) -> list[tuple[int, wire.MessageEnvelope]]:
    """Convenience: subscribe, collect until ``expected`` indications or timeout."""
    with connect_and_subscribe(endpoint, filters, xapp_id) as s:
        if expected is not None:
            s.wait_for(expected, timeout_s)
        return list(s.records)


def snr_samples_by_interval(timeline: FusedTimeline) -> dict[int, list[float]]:
    out: dict[int, list[float]] = {}
    for r in timeline.records:
        if r.source == "radio":
            out.setdefault(r.interval_index, []).append(r.value)
    return out


"""Agent runtime: synthetic load, video-function and radio agents.

Each agent owns one blocking TCP connection to the broker's agent endpoint.
Sending is paced against absolute deadlines (``start + k * interval``) so that
errors do not accumulate; control requests are serviced between sends.
"""

from __future__ import annotations

import logging
import os
import select
import socket
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import wire
from .cvf import CvfConfig, CvfEngine, CvfEvent, EventKind
from .radio import RadioConfig, RadioModel
from .scene import SceneConfig, iter_frames
from .wire import MessageType, Role, Status

log = logging.getLogger(__name__)

Endpoint = tuple[str, int]
now_ns = time.monotonic_ns

# Spin for the last stretch before a deadline only when another core can run
# the broker meanwhile; on a single core spinning starves the routing path.
BUSY_WAIT_NS = 200_000
BUSY_WAIT_MIN_RATE = 2000


class SetupRejected(ConnectionError):
    pass


class AgentConnectionLost(ConnectionError):
    pass


def _default_control_handler(req: wire.ControlRequest) -> tuple[Status, bytes]:
    return Status.OK, req.body


class AgentLink:
    """Established agent connection (setup done)."""

    def __init__(self, endpoint: Endpoint, agent_id: int, timeout_s: float = 5.0,
                 control_handler: Callable[[wire.ControlRequest], tuple[Status, bytes]] | None = None):
        self.agent_id = agent_id
        self.seq = wire.Sequencer(agent_id)
        self.decoder = wire.FrameDecoder()
        self.control_handler = control_handler or _default_control_handler
        self.controls_received: list[wire.ControlRequest] = []
        self.sock = socket.create_connection(endpoint, timeout=timeout_s)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send(MessageType.SETUP_REQUEST, wire.encode_setup_request(wire.SetupRequest(Role.AGENT)))
        resp = self._await(MessageType.SETUP_RESPONSE, timeout_s)
        r = wire.decode_response(resp.payload)
        if not r.ok:
            self.sock.close()
            raise SetupRejected(r.reason)
        self.sock.settimeout(None)

    def _send(self, msg_type: MessageType, payload: bytes) -> wire.MessageEnvelope:
        env = self.seq.envelope(msg_type, payload, now_ns())
        self.sock.sendall(wire.encode(env))
        return env

    def _await(self, msg_type: MessageType, timeout_s: float) -> wire.MessageEnvelope:
        deadline = time.monotonic() + timeout_s
        while True:
            self.sock.settimeout(max(0.001, deadline - time.monotonic()))
            data = self.sock.recv(65536)
            if not data:
                raise AgentConnectionLost("broker closed the connection during setup")
            for env in self.decoder.feed(data):
                if env.msg_type == msg_type:
                    return env

    def send_indication(self, payload: wire.SensingPayload) -> int:
        """Stamp and send one indication; return its send timestamp."""
        body = wire.encode_sensing(payload)
        ts = now_ns()
        env = wire.MessageEnvelope(MessageType.SENSING_INDICATION, self.agent_id, self.seq.next_seq, ts, body)
        self.seq.next_seq += 1
        try:
            self.sock.sendall(wire.encode(env))
        except OSError as exc:
            raise AgentConnectionLost(str(exc)) from exc
        return ts

    def poll(self, timeout_s: float = 0.0) -> int:
        """Service pending control requests; return how many were handled."""
        r, _, _ = select.select([self.sock], [], [], timeout_s)
        if not r:
            return 0
        data = self.sock.recv(65536)
        if not data:
            raise AgentConnectionLost("broker closed the connection")
        n = 0
        for env in self.decoder.feed(data):
            if env.msg_type != MessageType.CONTROL_REQUEST:
                continue
            req = wire.decode_control(env.payload)
            self.controls_received.append(req)
            status, body = self.control_handler(req)
            ack = wire.ControlAck(req.request_id, self.agent_id, status, body)
            self._send(MessageType.CONTROL_ACK, wire.encode_control_ack(ack))
            n += 1
        return n

    def wait_until(self, deadline_ns: int, busy_wait: bool) -> None:
        """Sleep (servicing control traffic) until ``deadline_ns``."""
        while True:
            left = deadline_ns - now_ns()
            if left <= 0:
                return
            if busy_wait and left <= BUSY_WAIT_NS:
                while now_ns() < deadline_ns:
                    pass
                return
            sleep_ns = left - BUSY_WAIT_NS if busy_wait else left
            self.poll(min(sleep_ns, 50_000_000) / 1e9)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self.sock.close()

    def __enter__(self) -> "AgentLink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------------------- load agent


@dataclass(frozen=True)
class LoadProfile:
    agent_id: int
    message_payload_bytes: int = 16
    rate_msgs_per_s: int = 1000
    duration_s: float = 1.0

    def __post_init__(self) -> None:
        if self.rate_msgs_per_s < 1:
            raise ValueError("rate_msgs_per_s must be >= 1")
        if self.message_payload_bytes < 0:
            raise ValueError("message_payload_bytes must be >= 0")
        if self.duration_s < 0:
            raise ValueError("duration_s must be >= 0")

    @property
    def message_count(self) -> int:
        return int(round(self.duration_s * self.rate_msgs_per_s))

    @property
    def wire_size(self) -> int:
        return wire.pad_wire_size(self.message_payload_bytes)

    def nominal_offset_ns(self, k: int) -> int:
        """Exact nominal send offset of message k, floored to whole nanoseconds."""
        return k * 1_000_000_000 // self.rate_msgs_per_s

    @property
    def interval_ns(self) -> float:
        return 1e9 / self.rate_msgs_per_s


@dataclass
class SendReport:
    agent_id: int
    sent_count: int
    achieved_rate: float
    max_send_jitter_ns: int
    p99_send_jitter_ns: int
    wire_size: int
    failed: bool = False
    error: str = ""
    host: str = field(default_factory=socket.gethostname)
    pid: int = field(default_factory=os.getpid)

    def to_dict(self) -> dict:
        return asdict(self)


def _busy_wait_default(rate: int) -> bool:
    return rate > BUSY_WAIT_MIN_RATE and (os.cpu_count() or 1) > 1


def run_load_agent(profile: LoadProfile, broker_endpoint: Endpoint, *,
                   start_at_ns: int | None = None, busy_wait: bool | None = None,
                   link: AgentLink | None = None) -> SendReport:
    """Send ``duration * rate`` SyntheticPad indications at the profile's pace."""
    n = profile.message_count
    own = link is None
    link = link or AgentLink(broker_endpoint, profile.agent_id)
    if busy_wait is None:
        busy_wait = _busy_wait_default(profile.rate_msgs_per_s)
    body = wire.encode_sensing(wire.SyntheticPad(bytes(profile.message_payload_bytes)))
    frame = bytearray(wire.HEADER_SIZE + len(body))
    wire.HEADER.pack_into(frame, 0, wire.MAGIC, wire.VERSION, MessageType.SENSING_INDICATION,
                          profile.agent_id, 0, 0, len(body))
    frame[wire.HEADER_SIZE:] = body
    jitter = np.zeros(n, dtype=np.int64)
    start = start_at_ns if start_at_ns is not None else now_ns()
    sent = 0
    failed, err = False, ""
    seq_ts = struct.Struct(">QQ")
    first_ts = last_ts = start
    try:
        for k in range(n):
            nominal = start + profile.nominal_offset_ns(k)
            link.wait_until(nominal, busy_wait)
            ts = now_ns()
            seq_ts.pack_into(frame, 8, link.seq.next_seq, ts)
            link.sock.sendall(frame)
            link.seq.next_seq += 1
            jitter[k] = ts - nominal
            if k == 0:
                first_ts = ts
            last_ts = ts
            sent += 1
    except OSError as exc:
        failed, err = True, f"connection lost after {sent} messages: {exc}"
        log.error("agent %d: %s", profile.agent_id, err)
    finally:
        if own:
            link.close()
    if sent > 1:
        rate = (sent - 1) / ((last_ts - first_ts) / 1e9) if last_ts > first_ts else float("inf")
    else:
        rate = float(sent) / profile.duration_s if profile.duration_s else 0.0
    j = jitter[:sent]
    return SendReport(
        agent_id=profile.agent_id,
        sent_count=sent,
        achieved_rate=float(rate),
        max_send_jitter_ns=int(j.max()) if sent else 0,
        p99_send_jitter_ns=int(np.percentile(j, 99, method="inverted_cdf")) if sent else 0,
        wire_size=profile.wire_size,
        failed=failed,
        error=err,
    )


# --------------------------------------------------------------------------- CVF and radio agents


@dataclass
class RunReport:
    agent_id: int
    kind: str
    emitted: int = 0
    steps: int = 0
    counts: dict[str, int] = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def event_to_payload(ev: CvfEvent, ue_id: int) -> wire.SensingPayload:
    if ev.kind is EventKind.PRIOR_BLOCKAGE:
        return wire.PriorBlockage(ev.obstacle_id, ev.box, ev.time_to_block_ms, ev.frame_index, ue_id)
    if ev.kind is EventKind.BLOCKAGE:
        return wire.Blockage(ev.obstacle_id, ev.box, ev.frame_index, ue_id)
    return wire.PostBlockage(ev.obstacle_id, ev.frame_index, ue_id)


def _paced(items: Iterable, link: AgentLink, start_ns: int, offset_ns: Callable[[int], int],
           time_scale: float):
    for i, item in enumerate(items):
        link.wait_until(start_ns + int(offset_ns(i) * time_scale), busy_wait=False)
        yield item


def run_cvf_agent(scene: SceneConfig, cvf_config: CvfConfig, broker_endpoint: Endpoint, *,
                  agent_id: int = 100, duration_s: float = 10.0, time_scale: float = 1.0,
                  start_at_ns: int | None = None) -> RunReport:
    """Process one frame per frame period and emit the engine's events.

    ``time_scale`` < 1 runs faster than real time; message contents use scene
    time only and do not depend on it.
    """
    if cvf_config.fps != scene.fps:
        raise ValueError(f"CVF fps {cvf_config.fps} != scene fps {scene.fps}")
    n_frames = int(round(duration_s * scene.fps))
    report = RunReport(agent_id, "cvf")
    engine = CvfEngine.for_scene(cvf_config, scene)
    link = AgentLink(broker_endpoint, agent_id)
    start = start_at_ns if start_at_ns is not None else now_ns()
    period_ns = 1_000_000_000 // scene.fps
    try:
        for frame in _paced(iter_frames(scene, n_frames), link, start, lambda k: k * period_ns, time_scale):
            report.steps += 1
            for ev in engine.step(frame):
                link.send_indication(event_to_payload(ev, scene.ue_id))
                report.emitted += 1
                report.counts[ev.kind.value] = report.counts.get(ev.kind.value, 0) + 1
    except (OSError, AgentConnectionLost) as exc:
        report.failed, report.error = True, str(exc)
    finally:
        link.close()
    return report


def run_radio_agent(radio_config: RadioConfig, scene: SceneConfig | None, broker_endpoint: Endpoint, *,
                    agent_id: int = 200, duration_s: float = 10.0, time_scale: float = 1.0,
                    start_at_ns: int | None = None) -> RunReport:
    """Emit one SnrReport per sample period for ``duration_s`` seconds of scene time."""
    model = RadioModel(radio_config, scene)
    ue_id = scene.ue_id if scene is not None else 1
    report = RunReport(agent_id, "radio")
    link = AgentLink(broker_endpoint, agent_id)
    start = start_at_ns if start_at_ns is not None else now_ns()
    period_ns = radio_config.sample_period_ns
    try:
        for t_ns, snr in _paced(model.samples(duration_s), link, start, lambda j: j * period_ns, time_scale):
            link.send_indication(wire.SnrReport(ue_id, snr, t_ns))
            report.steps += 1
            report.emitted += 1
        report.counts["SnrReport"] = report.emitted
    except (OSError, AgentConnectionLost) as exc:
        report.failed, report.error = True, str(exc)
    finally:
        link.close()
    return report

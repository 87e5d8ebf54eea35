"""RIC stand-in: agent and xApp endpoints, subscription table, indication routing.

The broker runs on a single asyncio loop, so subscription updates are atomic
with respect to routing. Indication frames are forwarded byte-for-byte; the
agent's send timestamp is never rewritten.

Each xApp connection owns a bounded outbound queue. While the socket accepts
data, frames go straight to the transport; once the transport pauses writing,
frames queue up to ``queue_limit`` and newer ones are dropped and counted.
"""

from __future__ import annotations

import asyncio
import json
import logging
import socket
import sys
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import IO

from . import wire
from .wire import MessageEnvelope, MessageType, PayloadKind, Role, Status

log = logging.getLogger(__name__)

BROKER_ID = 0
DEFAULT_QUEUE_LIMIT = 65_536


class BrokerError(RuntimeError):
    pass


@dataclass
class AgentCounters:
    received: int = 0
    bytes: int = 0
    matched: int = 0
    dropped_unmatched: int = 0
    fanout: int = 0
    delivered: int = 0
    dropped_overflow: int = 0
    # frames sitting in an xApp backlog at snapshot time
    queued: int = 0
    last_seq: int = -1


@dataclass
class BrokerStats:
    agents: int
    xapps: int
    routed: int
    dropped_unmatched: int
    dropped_overflow: int
    delivered: int
    received: int
    per_agent: dict[int, AgentCounters] = field(default_factory=dict)

    def line(self) -> str:
        d = {k: getattr(self, k) for k in
             ("agents", "xapps", "routed", "dropped_unmatched", "dropped_overflow", "delivered", "received")}
        return json.dumps(d, sort_keys=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_agent"] = {str(k): asdict(v) for k, v in self.per_agent.items()}
        return d

    def audit(self) -> list[str]:
        """Conservation checks; returns human-readable violations (empty if clean)."""
        bad = []
        for aid, c in self.per_agent.items():
            if c.received != c.matched + c.dropped_unmatched:
                bad.append(f"agent {aid}: received {c.received} != matched {c.matched} + unmatched {c.dropped_unmatched}")
            if c.fanout != c.delivered + c.dropped_overflow + c.queued:
                bad.append(f"agent {aid}: fanout {c.fanout} != delivered {c.delivered} + overflow "
                           f"{c.dropped_overflow} + queued {c.queued}")
        return bad


class SubscriptionTable:
    """Forward map xapp_id -> Subscription plus a reverse index on filter terms."""

    def __init__(self) -> None:
        self.forward: dict[int, wire.Subscription] = {}
        self.reverse: dict[tuple[int | None, PayloadKind | None], set[int]] = {}
        self._cache: dict[tuple[int, int], tuple[int, ...]] = {}

    def add(self, sub: wire.Subscription) -> None:
        self.remove(sub.xapp_id)
        self.forward[sub.xapp_id] = sub
        for f in sub.filter:
            self.reverse.setdefault((f.agent_id, f.kind), set()).add(sub.xapp_id)
        self._cache.clear()

    def remove(self, xapp_id: int) -> bool:
        sub = self.forward.pop(xapp_id, None)
        if sub is None:
            return False
        for f in sub.filter:
            key = (f.agent_id, f.kind)
            ids = self.reverse.get(key)
            if ids is not None:
                ids.discard(xapp_id)
                if not ids:
                    del self.reverse[key]
        self._cache.clear()
        return True

    def match(self, agent_id: int, kind: int) -> tuple[int, ...]:
        key = (agent_id, kind)
        hit = self._cache.get(key)
        if hit is None:
            k = PayloadKind(kind)
            ids = set()
            for rk in ((agent_id, k), (agent_id, None), (None, k), (None, None)):
                ids |= self.reverse.get(rk, set())
            hit = self._cache[key] = tuple(sorted(ids))
        return hit

    def consistent(self) -> bool:
        rebuilt: dict = {}
        for xid, sub in self.forward.items():
            for f in sub.filter:
                rebuilt.setdefault((f.agent_id, f.kind), set()).add(xid)
        return rebuilt == self.reverse


class _Conn(asyncio.Protocol):
    """One accepted connection on either endpoint."""

    def __init__(self, broker: "Broker", role: Role):
        self.broker = broker
        self.role = role
        self.transport: asyncio.Transport | None = None
        self.decoder = wire.FrameDecoder()
        self.node_id: int | None = None
        self.established = False
        self.closed = False
        self.seq = wire.Sequencer(BROKER_ID)
        self.paused = False
        self.backlog: deque[bytes] = deque()
        self.backlog_agents: deque[int] = deque()

    # asyncio callbacks

    def connection_made(self, transport) -> None:
        self.transport = transport
        sock = transport.get_extra_info("socket")
        if sock is not None:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.broker._conns.add(self)

    def data_received(self, data: bytes) -> None:
        try:
            envs = self.decoder.feed(data)
        except wire.WireError as exc:
            log.warning("closing %s connection after decode error: %s", self.role.name, exc)
            self.close()
            return
        for env in envs:
            if self.closed:
                return
            self.broker._handle(self, env)

    def connection_lost(self, exc) -> None:
        self.closed = True
        self.broker._drop(self)

    def pause_writing(self) -> None:
        self.paused = True

    def resume_writing(self) -> None:
        self.paused = False
        while self.backlog and not self.paused:
            self.transport.write(self.backlog.popleft())
            self.broker._count_delivered(self.backlog_agents.popleft())

    # helpers

    def send(self, msg_type: MessageType, payload: bytes) -> None:
        if self.closed:
            return
        env = self.seq.envelope(msg_type, payload, time.monotonic_ns())
        self.transport.write(wire.encode(env))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.transport.close()

    def reject(self, msg_type: MessageType, reason: str) -> None:
        self.send(msg_type, wire.encode_response(wire.Response(Status.REJECTED, reason)))
        self.close()


class Broker:
    """Routing core plus the two listening endpoints."""

    def __init__(self, agent_addr: tuple[str, int] = ("127.0.0.1", 0),
                 xapp_addr: tuple[str, int] = ("127.0.0.1", 0),
                 queue_limit: int = DEFAULT_QUEUE_LIMIT,
                 route_delay_us: float = 0.0,
                 stats_interval_s: float | None = None,
                 stats_stream: IO[str] | None = None):
        if agent_addr == xapp_addr and agent_addr[1] != 0:
            raise BrokerError(f"agent and xApp endpoints must differ, both are {agent_addr}")
        self.agent_addr = agent_addr
        self.xapp_addr = xapp_addr
        self.queue_limit = queue_limit
        # test hook: busy-wait this long per routed indication to emulate a slow host
        self.route_delay_us = route_delay_us
        self.stats_interval_s = stats_interval_s
        self.stats_stream = stats_stream
        self.table = SubscriptionTable()
        self.agents: dict[int, _Conn] = {}
        self.xapps: dict[int, _Conn] = {}
        self.counters: dict[int, AgentCounters] = {}
        self._conns: set[_Conn] = set()
        self._pending_ctrl: dict[int, tuple[_Conn, int, int]] = {}
        self._next_ctrl_id = 1
        self._servers: list[asyncio.AbstractServer] = []
        self._stats_task: asyncio.Task | None = None
        self.agent_port: int | None = None
        self.xapp_port: int | None = None

    # lifecycle

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        try:
            a = await loop.create_server(lambda: _Conn(self, Role.AGENT), *self.agent_addr)
            self._servers.append(a)
            x = await loop.create_server(lambda: _Conn(self, Role.XAPP), *self.xapp_addr)
            self._servers.append(x)
        except OSError as exc:
            for s in self._servers:
                s.close()
            self._servers.clear()
            raise BrokerError(f"bind failed: {exc}") from exc
        self.agent_port = a.sockets[0].getsockname()[1]
        self.xapp_port = x.sockets[0].getsockname()[1]
        if self.stats_interval_s:
            self._stats_task = asyncio.create_task(self._stats_loop())
        log.info("broker up: agents on %s, xapps on %s", self.agent_port, self.xapp_port)

    async def stop(self, drain_timeout_s: float = 2.0) -> BrokerStats:
        if self._stats_task is not None:
            self._stats_task.cancel()
        for s in self._servers:
            s.close()
        for s in self._servers:
            await s.wait_closed()
        deadline = time.monotonic() + drain_timeout_s
        # let queued xApp frames flush before closing
        while any(c.backlog for c in self.xapps.values()) and time.monotonic() < deadline:
            await asyncio.sleep(0.005)
        for c in list(self._conns):
            c.close()
        await asyncio.sleep(0)
        stats = self.stats()
        self._emit(stats)
        return stats

    async def _stats_loop(self) -> None:
        while True:
            await asyncio.sleep(self.stats_interval_s)
            self._emit(self.stats())

    def _emit(self, stats: BrokerStats) -> None:
        if self.stats_stream is not None:
            self.stats_stream.write(stats.line() + "\n")
            self.stats_stream.flush()

    def stats(self) -> BrokerStats:
        per = {k: AgentCounters(**asdict(v)) for k, v in self.counters.items()}
        for x in self.xapps.values():
            for aid in x.backlog_agents:
                per[aid].queued += 1
        return BrokerStats(
            agents=len(self.agents),
            xapps=len(self.xapps),
            routed=sum(c.matched for c in per.values()),
            dropped_unmatched=sum(c.dropped_unmatched for c in per.values()),
            dropped_overflow=sum(c.dropped_overflow for c in per.values()),
            delivered=sum(c.delivered for c in per.values()),
            received=sum(c.received for c in per.values()),
            per_agent=per,
        )

    # dispatch

    def _handle(self, conn: _Conn, env: MessageEnvelope) -> None:
        if not conn.established:
            self.handle_setup(conn, env)
            return
        t = env.msg_type
        if conn.role is Role.AGENT:
            if t == MessageType.SENSING_INDICATION:
                self.route(conn, env)
            elif t == MessageType.CONTROL_ACK:
                self._relay_ack(conn, wire.decode_control_ack(env.payload))
            else:
                log.warning("agent %s sent unexpected %s; closing", conn.node_id, t.name)
                conn.close()
            return
        try:
            body = wire.decode_body(env)
        except (wire.WireError, ValueError) as exc:
            if t == MessageType.SUBSCRIPTION_REQUEST:
                conn.send(MessageType.SUBSCRIPTION_RESPONSE,
                          wire.encode_response(wire.Response(Status.REJECTED, str(exc))))
                return
            log.warning("xapp %s sent malformed %s: %s", conn.node_id, t.name, exc)
            conn.close()
            return
        if t == MessageType.SUBSCRIPTION_REQUEST:
            self.handle_subscription(conn, body)
        elif t == MessageType.SUBSCRIPTION_DELETE_REQUEST:
            removed = self.table.remove(conn.node_id)
            status = Status.OK if removed else Status.REJECTED
            conn.send(MessageType.SUBSCRIPTION_RESPONSE,
                      wire.encode_response(wire.Response(status, "" if removed else "no subscription")))
        elif t == MessageType.CONTROL_REQUEST:
            self.handle_control(conn, body)
        else:
            log.warning("xapp %s sent unexpected %s; closing", conn.node_id, t.name)
            conn.close()

    def handle_setup(self, conn: _Conn, env: MessageEnvelope) -> None:
        if env.msg_type != MessageType.SETUP_REQUEST:
            conn.reject(MessageType.SETUP_RESPONSE, f"expected SetupRequest, got {env.msg_type.name}")
            return
        try:
            req = wire.decode_setup_request(env.payload)
        except wire.WireError as exc:
            conn.reject(MessageType.SETUP_RESPONSE, str(exc))
            return
        if req.role is not conn.role:
            conn.reject(MessageType.SETUP_RESPONSE, f"{req.role.name} on {conn.role.name} endpoint")
            return
        registry = self.agents if conn.role is Role.AGENT else self.xapps
        if env.agent_id in registry:
            conn.reject(MessageType.SETUP_RESPONSE, f"{conn.role.name.lower()} id {env.agent_id} already registered")
            return
        conn.node_id = env.agent_id
        conn.established = True
        registry[env.agent_id] = conn
        if conn.role is Role.AGENT:
            self.counters.setdefault(env.agent_id, AgentCounters())
        conn.send(MessageType.SETUP_RESPONSE, wire.encode_response(wire.Response(Status.OK)))

    def handle_subscription(self, conn: _Conn, sub: wire.Subscription) -> None:
        self.table.add(sub)
        conn.send(MessageType.SUBSCRIPTION_RESPONSE, wire.encode_response(wire.Response(Status.OK)))

    def route(self, conn: _Conn, env: MessageEnvelope) -> int:
        """Fan one indication out to matching xApps; return the number queued or written."""
        c = self.counters[conn.node_id]
        if env.seq <= c.last_seq:
            log.warning("agent %s seq went backwards (%d after %d); closing", conn.node_id, env.seq, c.last_seq)
            conn.close()
            return 0
        c.last_seq = env.seq
        c.received += 1
        c.bytes += env.wire_size
        if self.route_delay_us:
            until = time.perf_counter() + self.route_delay_us * 1e-6
            while time.perf_counter() < until:
                pass
        targets = self.table.match(env.agent_id, env.payload[0])
        if not targets:
            c.dropped_unmatched += 1
            return 0
        c.matched += 1
        frame = wire.encode(env)
        n = 0
        for xid in targets:
            out = self.xapps.get(xid)
            c.fanout += 1
            if out is None or out.closed:
                c.dropped_overflow += 1
                continue
            if not out.paused and not out.backlog:
                out.transport.write(frame)
                c.delivered += 1
                n += 1
            elif len(out.backlog) < self.queue_limit:
                out.backlog.append(frame)
                out.backlog_agents.append(env.agent_id)
                n += 1
            else:
                c.dropped_overflow += 1
        return n

    def _count_delivered(self, agent_id: int) -> None:
        self.counters[agent_id].delivered += 1

    def handle_control(self, conn: _Conn, req: wire.ControlRequest) -> None:
        target = self.agents.get(req.target_agent)
        if target is None or target.closed:
            ack = wire.ControlAck(req.request_id, req.target_agent, Status.UNKNOWN_TARGET)
            conn.send(MessageType.CONTROL_ACK, wire.encode_control_ack(ack))
            return
        rid = self._next_ctrl_id
        self._next_ctrl_id = (self._next_ctrl_id % wire.U32_MAX) + 1
        self._pending_ctrl[rid] = (conn, req.request_id, req.target_agent)
        fwd = wire.ControlRequest(req.target_agent, rid, req.body)
        env = MessageEnvelope(MessageType.CONTROL_REQUEST, conn.node_id, target.seq.next_seq,
                              time.monotonic_ns(), wire.encode_control(fwd))
        target.seq.next_seq += 1
        target.transport.write(wire.encode(env))

    def _relay_ack(self, agent_conn: _Conn, ack: wire.ControlAck) -> None:
        pending = self._pending_ctrl.pop(ack.request_id, None)
        if pending is None:
            log.warning("agent %s acked unknown control request %d", agent_conn.node_id, ack.request_id)
            return
        xconn, orig_rid, _ = pending
        out = wire.ControlAck(orig_rid, agent_conn.node_id, ack.status, ack.body)
        xconn.send(MessageType.CONTROL_ACK, wire.encode_control_ack(out))

    def _drop(self, conn: _Conn) -> None:
        self._conns.discard(conn)
        if not conn.established:
            return
        if conn.role is Role.AGENT:
            if self.agents.get(conn.node_id) is conn:
                del self.agents[conn.node_id]
            for rid, (xconn, orig, target) in list(self._pending_ctrl.items()):
                if target == conn.node_id:
                    del self._pending_ctrl[rid]
                    xconn.send(MessageType.CONTROL_ACK,
                               wire.encode_control_ack(wire.ControlAck(orig, target, Status.FAILED)))
        else:
            if self.xapps.get(conn.node_id) is conn:
                del self.xapps[conn.node_id]
                self.table.remove(conn.node_id)
            # frames that never reached the socket count as overflow drops
            while conn.backlog:
                conn.backlog.popleft()
                self.counters[conn.backlog_agents.popleft()].dropped_overflow += 1


class BrokerThread:
    """Run a :class:`Broker` on a private event loop in a daemon thread."""

    def __init__(self, **kwargs):
        self.broker = Broker(**kwargs)
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, name="broker", daemon=True)
        self._started = threading.Event()
        self._error: BaseException | None = None
        self.final_stats: BrokerStats | None = None

    def _run(self) -> None:
        asyncio.set_event_loop(self.loop)
        try:
            self.loop.run_until_complete(self.broker.start())
        except BaseException as exc:  # surfaced to the caller of start()
            self._error = exc
            self._started.set()
            return
        self._started.set()
        self.loop.run_forever()

    def start(self) -> "BrokerThread":
        if self._thread.is_alive() or self._started.is_set():
            return self
        self._thread.start()
        self._started.wait()
        if self._error is not None:
            raise self._error
        return self

    @property
    def agent_endpoint(self) -> tuple[str, int]:
        return (self.broker.agent_addr[0], self.broker.agent_port)

    @property
    def xapp_endpoint(self) -> tuple[str, int]:
        return (self.broker.xapp_addr[0], self.broker.xapp_port)

    def call(self, fn, *args):
        """Run ``fn(*args)`` on the broker loop and return its result."""
        done = threading.Event()
        box = {}

        def run():
            try:
                box["v"] = fn(*args)
            except BaseException as exc:
                box["e"] = exc
            done.set()

        self.loop.call_soon_threadsafe(run)
        done.wait()
        if "e" in box:
            raise box["e"]
        return box["v"]

    def stats(self) -> BrokerStats:
        return self.call(self.broker.stats)

    def stop(self) -> BrokerStats:
        if self.final_stats is not None:
            return self.final_stats
        fut = asyncio.run_coroutine_threadsafe(self.broker.stop(), self.loop)
        self.final_stats = fut.result()
        self.loop.call_soon_threadsafe(self.loop.stop)
        self._thread.join()
        self.loop.close()
        return self.final_stats

    def __enter__(self) -> "BrokerThread":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(agent_addr=("127.0.0.1", 0), xapp_addr=("127.0.0.1", 0), **kwargs) -> BrokerThread:
    """Start a broker in the background and return its running handle."""
    return BrokerThread(agent_addr=agent_addr, xapp_addr=xapp_addr, **kwargs).start()


async def run_forever(broker: Broker, stop: asyncio.Event) -> BrokerStats:
    await broker.start()
    await stop.wait()
    return await broker.stop()


def main_loop(agent_addr, xapp_addr, stats_interval_s: float = 1.0, stats_stream=None, **kwargs) -> BrokerStats:
    """Blocking broker for the command line; returns final stats after SIGINT/SIGTERM."""
    import signal

    async def _main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        b = Broker(agent_addr, xapp_addr, stats_interval_s=stats_interval_s,
                   stats_stream=stats_stream or sys.stderr, **kwargs)
        return await run_forever(b, stop)

    return asyncio.run(_main())

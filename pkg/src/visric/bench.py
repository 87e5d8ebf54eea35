"""Latency harness: broker-path delay from agent send stamp to xApp receive stamp.

Every repetition of a cell runs in fresh processes: one broker, one
measurement xApp subscribed to all SyntheticPad indications, and N load
agents released together at a common start instant. All stamps come from the
host's monotonic clock, so delays need no clock synchronization.
"""

from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import math
import multiprocessing as mp
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import AgentLink, LoadProfile, SendReport, run_load_agent
from .broker import Broker
from .wire import PayloadKind

log = logging.getLogger(__name__)

#: Support observations reported for the original testbed; hardware-specific,
#: carried as annotations only.
REFERENCE_SUPPORT = [
    {"agents": 6, "size_bytes": 16, "rate_per_agent": 1000, "supported": True},
    {"agents": 1, "size_bytes": 2048, "rate_per_agent": 1000, "supported": True},
    {"agents": 2, "size_bytes": 2048, "rate_per_agent": 1000, "supported": False},
    {"agents": 2, "size_bytes": 1024, "rate_per_agent": 1000, "supported": True},
    {"agents": 9, "size_bytes": 16, "rate_per_agent": 500, "supported": True},
    {"agents": 2, "size_bytes": 16, "rate_per_agent": 5000, "supported": True},
]


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class Thresholds:
    mean_ms: float = 1.0
    p99_ms: float = 5.0
    max_loss: int = 0


@dataclass(frozen=True)
class BenchConfig:
    agents: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    sizes_bytes: tuple[int, ...] = (16, 64, 256, 1024, 2048)
    rates_per_agent: tuple[int, ...] = (500, 1000, 2000, 5000)
    duration_s: float = 10.0
    repetitions: int = 3
    thresholds: Thresholds = Thresholds()
    # "views": the three one-factor sweeps; "grid": full cartesian product
    mode: str = "views"
    fixed_rate: int = 1000
    fixed_size: int = 16
    route_delay_us: float = 0.0
    keep_raw: bool = False

    def __post_init__(self) -> None:
        if not self.agents or not self.sizes_bytes or not self.rates_per_agent:
            raise ValueError("sweep lists must be non-empty")
        if self.duration_s < 1:
            raise ValueError("duration_s must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if any(r < 1 for r in self.rates_per_agent):
            raise ValueError("rates must be >= 1")
        if any(a < 1 for a in self.agents):
            raise ValueError("agent counts must be >= 1")
        if self.mode not in ("views", "grid"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def cells(self) -> list["Cell"]:
        if self.mode == "grid":
            keys = {(n, s, r) for n in self.agents for s in self.sizes_bytes for r in self.rates_per_agent}
        else:
            keys = {(n, s, self.fixed_rate) for n in self.agents for s in self.sizes_bytes}
            keys |= {(n, self.fixed_size, r) for n in self.agents for r in self.rates_per_agent}
        return [Cell(*k) for k in sorted(keys)]

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        if "thresholds" in d:
            d["thresholds"] = Thresholds(**d["thresholds"])
        for k in ("agents", "sizes_bytes", "rates_per_agent"):
            if k in d:
                d[k] = tuple(int(x) for x in d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class Cell:
    agents: int
    size_bytes: int
    rate_per_agent: int

    def __post_init__(self) -> None:
        if self.agents < 1:
            raise ValueError("cell needs at least one agent")
        if self.rate_per_agent < 1:
            raise ValueError("cell rate must be >= 1")
        if self.size_bytes < 0:
            raise ValueError("cell size must be >= 0")


@dataclass(frozen=True)
class LatencyRecord:
    agent_id: int
    seq: int
    send_ns: int
    recv_ns: int

    @property
    def delay_ns(self) -> int:
        return self.recv_ns - self.send_ns


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    max_ms: float


def nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile of an ascending array (p in (0, 100])."""
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100.0 * n))
    return float(sorted_values[rank - 1])


def summarize(records: Sequence[LatencyRecord] | np.ndarray) -> LatencyStats:
    """Exact mean, nearest-rank percentiles and max of the delays, in ms.

    Accepts LatencyRecord objects or an array of delays in nanoseconds.
    """
    if isinstance(records, np.ndarray):
        d = records.astype(np.int64)
    else:
        d = np.fromiter((r.delay_ns for r in records), dtype=np.int64)
    if d.size == 0:
        raise ValueError("cannot summarize an empty record set")
    d = np.sort(d)
    # integer sum keeps the mean exact before the final division
    mean = int(d.sum(dtype=np.int64)) / d.size
    return LatencyStats(
        count=int(d.size),
        mean_ms=mean / 1e6,
        p50_ms=nearest_rank(d, 50) / 1e6,
        p95_ms=nearest_rank(d, 95) / 1e6,
        p99_ms=nearest_rank(d, 99) / 1e6,
        max_ms=float(d[-1]) / 1e6,
    )


# --------------------------------------------------------------------------- processes


def _ctx():
    return mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")


def _broker_proc(pipe, route_delay_us: float) -> None:
    async def main():
        b = Broker(route_delay_us=route_delay_us)
        await b.start()
        pipe.send((b.agent_port, b.xapp_port))
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        loop.add_reader(pipe.fileno(), stop.set)
        await stop.wait()
        loop.remove_reader(pipe.fileno())
        pipe.recv()
        stats = await b.stop()
        pipe.send(stats.to_dict())

    asyncio.run(main())


def _xapp_proc(pipe, endpoint) -> None:
    from .xapp import connect_and_subscribe, kinds_filter

    s = connect_and_subscribe(endpoint, kinds_filter([PayloadKind.SYNTHETIC_PAD]), xapp_id=1,
                              keep_envelopes=False)
    pipe.send("ready")
    expected, timeout_s, idle_s = pipe.recv()
    s.wait_for(expected, timeout_s, idle_s)
    rows = np.array(s.latency_rows, dtype=np.int64).reshape(-1, 4)
    s.close()
    pipe.send(rows)


def _agent_proc(pipe, profile: LoadProfile, endpoint) -> None:
    try:
        link = AgentLink(endpoint, profile.agent_id)
    except Exception as exc:
        pipe.send(("error", repr(exc)))
        return
    pipe.send(("ready", None))
    start_at = pipe.recv()
    report = run_load_agent(profile, endpoint, start_at_ns=start_at, link=link)
    link.close()
    pipe.send(("done", report))


@dataclass
class RepetitionResult:
    repetition: int
    valid: bool
    stats: LatencyStats | None
    sent: int
    received: int
    loss: int
    overflow: int
    unmatched: int
    fifo_ok: bool
    nonneg_ok: bool
    audit: list[str]
    send_reports: list[SendReport]
    error: str = ""
    rows: np.ndarray | None = field(default=None, repr=False)

    @property
    def invariants_ok(self) -> bool:
        return self.fifo_ok and self.nonneg_ok and not self.audit


def check_fifo(rows: np.ndarray) -> bool:
    """Per-agent strictly increasing seq in arrival order."""
    if rows.size == 0:
        return True
    for aid in np.unique(rows[:, 0]):
        seq = rows[rows[:, 0] == aid, 1]
        if np.any(np.diff(seq) <= 0):
            return False
    return True


def run_repetition(cell: Cell, duration_s: float, repetition: int = 0, route_delay_us: float = 0.0,
                   settle_timeout_s: float = 10.0) -> RepetitionResult:
    ctx = _ctx()
    procs = []
    bpipe, bchild = ctx.Pipe()
    bp = ctx.Process(target=_broker_proc, args=(bchild, route_delay_us), daemon=True)
    bp.start()
    procs.append(bp)
    try:
        if not bpipe.poll(10):
            raise BenchError("broker did not start")
        agent_port, xapp_port = bpipe.recv()
        xpipe, xchild = ctx.Pipe()
        xp = ctx.Process(target=_xapp_proc, args=(xchild, ("127.0.0.1", xapp_port)), daemon=True)
        xp.start()
        procs.append(xp)
        if not xpipe.poll(10) or xpipe.recv() != "ready":
            raise BenchError("xApp did not subscribe")
        apipes = []
        for i in range(cell.agents):
            prof = LoadProfile(agent_id=10 + i, message_payload_bytes=cell.size_bytes,
                               rate_msgs_per_s=cell.rate_per_agent, duration_s=duration_s)
            p, c = ctx.Pipe()
            ap = ctx.Process(target=_agent_proc, args=(c, prof, ("127.0.0.1", agent_port)), daemon=True)
            ap.start()
            procs.append(ap)
            apipes.append(p)
        for p in apipes:
            if not p.poll(10):
                raise BenchError("agent did not connect")
            tag, info = p.recv()
            if tag != "ready":
                raise BenchError(f"agent failed to connect: {info}")
        start_at = time.monotonic_ns() + 100_000_000
        for p in apipes:
            p.send(start_at)
        reports: list[SendReport] = []
        for p in apipes:
            if not p.poll(duration_s * 3 + 30):
                raise BenchError("agent did not finish")
            reports.append(p.recv()[1])
        sent = sum(r.sent_count for r in reports)
        xpipe.send((sent, settle_timeout_s, 2.0))
        rows = xpipe.recv()
        bpipe.send("stop")
        stats = bpipe.recv()
    except BenchError as exc:
        return RepetitionResult(repetition, False, None, 0, 0, 0, 0, 0, True, True, [], [], str(exc))
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.kill()
    failed = [r for r in reports if r.failed]
    delays = rows[:, 3] - rows[:, 2]
    received = len(rows)
    audit = []
    per = stats["per_agent"]
    for r in reports:
        c = per.get(str(r.agent_id))
        if c is None:
            audit.append(f"agent {r.agent_id}: unknown to broker")
            continue
        if c["received"] != r.sent_count:
            audit.append(f"agent {r.agent_id}: sent {r.sent_count} but broker received {c['received']}")
        if c["received"] != c["matched"] + c["dropped_unmatched"]:
            audit.append(f"agent {r.agent_id}: matched/unmatched do not add up")
        if c["fanout"] != c["delivered"] + c["dropped_overflow"] + c.get("queued", 0):
            audit.append(f"agent {r.agent_id}: delivered/overflow do not add up")
    overflow = int(stats["dropped_overflow"])
    unmatched = int(stats["dropped_unmatched"])
    if sent != received + overflow + unmatched:
        audit.append(f"conservation: sent {sent} != received {received} + overflow {overflow} + unmatched {unmatched}")
    return RepetitionResult(
        repetition=repetition,
        valid=not failed,
        stats=summarize(delays) if received else None,
        sent=sent,
        received=received,
        loss=sent - received,
        overflow=overflow,
        unmatched=unmatched,
        fifo_ok=check_fifo(rows),
        nonneg_ok=bool(np.all(delays >= 0)),
        audit=audit,
        send_reports=reports,
        error="; ".join(r.error for r in failed),
        rows=rows,
    )


@dataclass
class CellReport:
    cell: Cell
    repetitions: list[RepetitionResult]
    mean_ms: float | None
    p50_ms: float | None
    p95_ms: float | None
    p99_ms: float | None
    max_ms: float | None
    loss_count: int
    overflow_count: int
    supported: bool
    valid: bool
    invariants_ok: bool

    def summary(self) -> dict:
        d = {k: getattr(self, k) for k in ("mean_ms", "p50_ms", "p95_ms", "p99_ms", "max_ms", "loss_count",
                                           "overflow_count", "supported", "valid", "invariants_ok")}
        d.update(asdict(self.cell))
        d["wire_size_bytes"] = self.cell.size_bytes + 33
        d["repetition_means_ms"] = [r.stats.mean_ms if r.stats else None for r in self.repetitions]
        d["max_send_jitter_ms"] = max((s.max_send_jitter_ns for r in self.repetitions for s in r.send_reports),
                                      default=0) / 1e6
        d["hosts"] = sorted({s.host for r in self.repetitions for s in r.send_reports})
        return d


def _median(xs):
    xs = [x for x in xs if x is not None]
    return statistics.median(xs) if xs else None


def run_cell(cell: Cell, duration_s: float = 10.0, repetitions: int = 3,
             thresholds: Thresholds = Thresholds(), route_delay_us: float = 0.0,
             keep_raw: bool = False) -> CellReport:
    reps = []
    for i in range(repetitions):
        r = run_repetition(cell, duration_s, i, route_delay_us)
        if not keep_raw:
            r.rows = None
        reps.append(r)
        log.info("cell %s rep %d: %s", cell, i, r.stats)
    valid = all(r.valid for r in reps)
    stats = [r.stats for r in reps]
    mean = _median([s.mean_ms if s else None for s in stats])
    p99 = _median([s.p99_ms if s else None for s in stats])
    loss = sum(r.loss for r in reps)
    supported = (valid and mean is not None and p99 is not None and mean < thresholds.mean_ms
                 and p99 < thresholds.p99_ms and loss <= thresholds.max_loss)
    return CellReport(
        cell, reps, mean,
        _median([s.p50_ms if s else None for s in stats]),
        _median([s.p95_ms if s else None for s in stats]),
        p99,
        max((s.max_ms for s in stats if s), default=None),
        loss, sum(r.overflow for r in reps), supported, valid,
        all(r.invariants_ok for r in reps),
    )


@dataclass
class BenchReport:
    config: BenchConfig
    cells: list[CellReport]
    host: dict = field(default_factory=dict)

    def cell(self, agents: int, size: int, rate: int) -> CellReport | None:
        return next((c for c in self.cells if (c.cell.agents, c.cell.size_bytes, c.cell.rate_per_agent)
                     == (agents, size, rate)), None)

    @property
    def invariants_ok(self) -> bool:
        return all(c.invariants_ok for c in self.cells)

    def support_matrix(self) -> list[dict]:
        return [dict(asdict(c.cell), supported=c.supported) for c in self.cells]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "host": self.host,
            "cells": [c.summary() for c in self.cells],
            "support_matrix": self.support_matrix(),
            "reference_support": REFERENCE_SUPPORT,
            "invariants_ok": self.invariants_ok,
        }

    # CSV outputs

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["agents", "size_bytes", "wire_size_bytes", "rate_per_agent", "repetition", "count",
                    "mean_ms", "p50_ms", "p95_ms", "p99_ms", "max_ms", "loss", "overflow", "supported", "valid"])
        f = lambda x: "" if x is None else f"{x:.6f}"
        for c in self.cells:
            k = c.cell
            for r in c.repetitions:
                s = r.stats
                w.writerow([k.agents, k.size_bytes, k.size_bytes + 33, k.rate_per_agent, r.repetition,
                            s.count if s else 0, f(s and s.mean_ms), f(s and s.p50_ms), f(s and s.p95_ms),
                            f(s and s.p99_ms), f(s and s.max_ms), r.loss, r.overflow, "", int(r.valid)])
            w.writerow([k.agents, k.size_bytes, k.size_bytes + 33, k.rate_per_agent, "agg",
                        sum(r.received for r in c.repetitions), f(c.mean_ms), f(c.p50_ms), f(c.p95_ms),
                        f(c.p99_ms), f(c.max_ms), c.loss_count, c.overflow_count, int(c.supported), int(c.valid)])
        return buf.getvalue()

    def _series(self, x: str, group: str, fixed: dict) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([group, x, "mean_ms", "p99_ms", "supported"])
        rows = []
        for c in self.cells:
            d = asdict(c.cell)
            if all(d[k] == v for k, v in fixed.items()):
                rows.append((d[group], d[x], c.mean_ms, c.p99_ms, c.supported))
        for g, xv, m, p, s in sorted(rows):
            w.writerow([g, xv, "" if m is None else f"{m:.6f}", "" if p is None else f"{p:.6f}", int(s)])
        return buf.getvalue()

    def series_csvs(self) -> dict[str, str]:
        cfg = self.config
        return {
            "latency_vs_size.csv": self._series("size_bytes", "agents", {"rate_per_agent": cfg.fixed_rate}),
            "latency_vs_agents.csv": self._series("agents", "rate_per_agent", {"size_bytes": cfg.fixed_size}),
            "latency_vs_rate.csv": self._series("rate_per_agent", "agents", {"size_bytes": cfg.fixed_size}),
        }

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report.json": out / "report.json", "cells.csv": out / "cells.csv"}
        paths["report.json"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        paths["cells.csv"].write_text(self.cells_csv())
        for name, text in self.series_csvs().items():
            paths[name] = out / name
            paths[name].write_text(text)
        if self.config.keep_raw:
            raw = out / "raw_records.csv"
            with raw.open("w") as fh:
                fh.write("agents,size_bytes,rate_per_agent,repetition,agent_id,seq,send_ns,recv_ns\n")
                for c in self.cells:
                    for r in c.repetitions:
                        if r.rows is None:
                            continue
                        k = c.cell
                        for a, s, t0, t1 in r.rows.tolist():
                            fh.write(f"{k.agents},{k.size_bytes},{k.rate_per_agent},{r.repetition},{a},{s},{t0},{t1}\n")
            paths["raw_records.csv"] = raw
        return paths


def host_info() -> dict:
    return {"hostname": platform.node(), "cpu_count": os.cpu_count(), "platform": platform.platform(),
            "python": platform.python_version(), "placement": "single host, one process per component"}


def run_sweep(config: BenchConfig, cells: Iterable[Cell] | None = None) -> BenchReport:
    reports = []
    for cell in (list(cells) if cells is not None else config.cells()):
        try:
            reports.append(run_cell(cell, config.duration_s, config.repetitions, config.thresholds,
                                    config.route_delay_us, config.keep_raw))
        except Exception as exc:  # partial sweeps are allowed; the cell is marked
            log.error("cell %s failed: %s", cell, exc)
            reports.append(CellReport(cell, [], None, None, None, None, None, 0, 0, False, False, True))
    return BenchReport(config, reports, host_info())


def trend_violations(report: BenchReport, factor: float = 0.8) -> list[str]:
    """Check that latency does not fall as load rises, up to ``factor``.

    Load rises with rate (agents and size fixed), with agent count (rate and
    size fixed) and with size (agents and rate fixed).
    """
    bad = []
    by_key = {(c.cell.agents, c.cell.size_bytes, c.cell.rate_per_agent): c for c in report.cells}
    for (n, s, r), lo in by_key.items():
        for (n2, s2, r2), hi in by_key.items():
            if (n2, s2, r2) == (n, s, r) or lo.mean_ms is None or hi.mean_ms is None:
                continue
            one_factor = sum((n2 != n, s2 != s, r2 != r)) == 1
            heavier = n2 >= n and s2 >= s and r2 >= r
            if one_factor and heavier and hi.mean_ms < factor * lo.mean_ms:
                bad.append(f"{hi.cell} mean {hi.mean_ms:.4f} ms < {factor} x {lo.cell} mean {lo.mean_ms:.4f} ms")
    return bad


def frontier_violations(report: BenchReport) -> list[str]:
    """Support must be downward closed: a supported cell implies every lighter
    single-factor neighbour is supported too."""
    bad = []
    by_key = {(c.cell.agents, c.cell.size_bytes, c.cell.rate_per_agent): c for c in report.cells}
    for (n, s, r), hi in by_key.items():
        if not hi.supported:
            continue
        for (n2, s2, r2), lo in by_key.items():
            lighter = n2 <= n and s2 <= s and r2 <= r and (n2, s2, r2) != (n, s, r)
            if lighter and lo.valid and not lo.supported:
                bad.append(f"{hi.cell} supported but lighter {lo.cell} is not")
    return bad

"""End-to-end blockage use case: broker, CVF agent, radio agent and the
vision-aided xApp, wired together on loopback.

Components run as threads of the calling process by default, or as one
process each with ``processes=True``; both produce the same outputs.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import wire
from .agent import RunReport, run_cvf_agent, run_radio_agent
from .broker import BrokerThread
from .cvf import CvfConfig, events_to_csv, run_engine
from .radio import RadioConfig
from .scene import SceneConfig, ground_truth_blocked, iter_frames
from .xapp import (CVF_KINDS, FusedTimeline, TransitionLog, connect_and_subscribe, detect_transitions,
                   fuse, kinds_filter, phase_means)

log = logging.getLogger(__name__)

CVF_AGENT_ID = 100
RADIO_AGENT_ID = 200
XAPP_ID = 1
USECASE_KINDS = CVF_KINDS + (wire.PayloadKind.SNR_REPORT,)


class UseCaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    scene: SceneConfig
    cvf: CvfConfig = CvfConfig()
    radio: RadioConfig = RadioConfig()
    duration_s: float = 10.0
    output_dir: str = "usecase_out"
    time_scale: float = 1.0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.scene.fps))

    def blocked_frames(self) -> list[int]:
        return [k for k in range(self.n_frames) if ground_truth_blocked(self.scene, k)[self.scene.ue_id]]

    def validate(self) -> None:
        if self.cvf.fps != self.scene.fps:
            raise ValueError(f"cvf fps {self.cvf.fps} differs from scene fps {self.scene.fps}")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")
        blocked = self.blocked_frames()
        # the run must show the blockage ending and the full post hold after it
        if blocked and blocked[-1] + self.cvf.post_hold_frames >= self.n_frames - 1:
            raise ValueError(
                f"duration {self.duration_s}s ends before the blockage (last blocked frame "
                f"{blocked[-1]}) plus {self.cvf.post_hold_frames} post frames")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(
            scene=SceneConfig.from_dict(d["scene"]),
            cvf=CvfConfig.from_dict(d.get("cvf", {})),
            radio=RadioConfig.from_dict(d.get("radio", {})),
            duration_s=float(d.get("duration_s", 10.0)),
            output_dir=str(d.get("output_dir", "usecase_out")),
            time_scale=float(d.get("time_scale", 1.0)),
        )

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return {"scene": self.scene.to_dict(), "cvf": asdict(self.cvf), "radio": asdict(self.radio),
                "duration_s": self.duration_s, "output_dir": self.output_dir, "time_scale": self.time_scale}


def load_scenario(path: str | Path) -> ScenarioSpec:
    return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))


def canonical_scenario() -> ScenarioSpec:
    text = resources.files("visric").joinpath("data/canonical_scenario.json").read_text()
    return ScenarioSpec.from_dict(json.loads(text))


@dataclass
class UseCaseResult:
    timeline: FusedTimeline
    transitions: TransitionLog
    agent_reports: list[RunReport]
    broker_stats: dict
    summary: dict
    paths: dict[str, Path] = field(default_factory=dict)


# --------------------------------------------------------------------------- component runners


def _agent_target(kind: str, spec: ScenarioSpec, endpoint, start_at_ns: int):
    if kind == "cvf":
        return run_cvf_agent(spec.scene, spec.cvf, endpoint, agent_id=CVF_AGENT_ID, duration_s=spec.duration_s,
                             time_scale=spec.time_scale, start_at_ns=start_at_ns)
    return run_radio_agent(spec.radio, spec.scene, endpoint, agent_id=RADIO_AGENT_ID, duration_s=spec.duration_s,
                           time_scale=spec.time_scale, start_at_ns=start_at_ns)


def _agent_proc(q, kind, spec, endpoint, start_at_ns):
    try:
        q.put((kind, _agent_target(kind, spec, endpoint, start_at_ns)))
    except Exception as exc:
        q.put((kind, RunReport(0, kind, failed=True, error=repr(exc))))


def _xapp_proc(pipe, endpoint):
    s = connect_and_subscribe(endpoint, kinds_filter(USECASE_KINDS), XAPP_ID)
    pipe.send("ready")
    expected, timeout_s = pipe.recv()
    s.wait_for(expected, timeout_s, idle_s=3.0)
    recs = [(t, wire.encode(e)) for t, e in s.records]
    s.close()
    pipe.send(recs)


def _broker_proc(pipe):
    from .bench import _broker_proc as run
    run(pipe, 0.0)


def run_usecase(spec: ScenarioSpec, out_dir: str | Path | None = None, *, normalize_timestamps: bool = False,
                processes: bool = False) -> UseCaseResult:
    spec.validate()
    out = Path(out_dir if out_dir is not None else spec.output_dir)
    if processes:
        recs, reports, stats = _run_processes(spec)
    else:
        recs, reports, stats = _run_threads(spec)
    failed = [r for r in reports if r.failed]
    if failed:
        raise UseCaseError("; ".join(f"{r.kind} agent failed: {r.error}" for r in failed))
    expected = sum(r.emitted for r in reports)
    if len(recs) != expected:
        raise UseCaseError(f"xApp received {len(recs)} of {expected} indications")
    timeline = fuse(recs, fps=spec.scene.fps, interval_ms=1000 // spec.scene.fps)
    transitions = detect_transitions(timeline)
    summary = _summary(spec, timeline, transitions, reports, stats, normalize_timestamps)
    result = UseCaseResult(timeline, transitions, reports, stats, summary)
    result.paths = write_outputs(result, out, normalize_timestamps)
    return result


def _run_threads(spec: ScenarioSpec):
    with BrokerThread() as b:
        session = connect_and_subscribe(b.xapp_endpoint, kinds_filter(USECASE_KINDS), XAPP_ID)
        try:
            start_at = time.monotonic_ns() + 200_000_000
            reports: dict[str, RunReport] = {}

            def run(kind):
                try:
                    reports[kind] = _agent_target(kind, spec, b.agent_endpoint, start_at)
                except Exception as exc:
                    reports[kind] = RunReport(0, kind, failed=True, error=repr(exc))

            threads = [threading.Thread(target=run, args=(k,), name=f"{k}-agent") for k in ("cvf", "radio")]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            expected = sum(r.emitted for r in reports.values())
            session.wait_for(expected, timeout_s=30.0, idle_s=3.0)
            recs = list(session.records)
        finally:
            session.close()
        stats = b.stop().to_dict()
    return recs, [reports["cvf"], reports["radio"]], stats


def _run_processes(spec: ScenarioSpec):
    ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
    bpipe, bchild = ctx.Pipe()
    procs = [ctx.Process(target=_broker_proc, args=(bchild,), daemon=True)]
    procs[0].start()
    try:
        if not bpipe.poll(10):
            raise UseCaseError("broker did not start")
        agent_port, xapp_port = bpipe.recv()
        xpipe, xchild = ctx.Pipe()
        xp = ctx.Process(target=_xapp_proc, args=(xchild, ("127.0.0.1", xapp_port)), daemon=True)
        xp.start()
        procs.append(xp)
        if not xpipe.poll(10):
            raise UseCaseError("xApp did not start")
        xpipe.recv()
        q = ctx.Queue()
        start_at = time.monotonic_ns() + 300_000_000
        for kind in ("cvf", "radio"):
            p = ctx.Process(target=_agent_proc, args=(q, kind, spec, ("127.0.0.1", agent_port), start_at),
                            daemon=True)
            p.start()
            procs.append(p)
        reports = dict(q.get(timeout=spec.duration_s * spec.time_scale + 60) for _ in range(2))
        xpipe.send((sum(r.emitted for r in reports.values()), 30.0))
        recs = [(t, wire.decode(b)) for t, b in xpipe.recv()]
        bpipe.send("stop")
        stats = bpipe.recv()
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.kill()
    return recs, [reports["cvf"], reports["radio"]], stats


# --------------------------------------------------------------------------- outputs


def _summary(spec, timeline, transitions, reports, stats, normalize) -> dict:
    blocked = spec.blocked_frames()
    means = phase_means(timeline)
    kinds = timeline.kinds()
    s = {
        "duration_s": spec.duration_s,
        "fps": spec.scene.fps,
        "frames": spec.n_frames,
        "snr_samples": sum(iv.n_samples for iv in timeline.intervals),
        "cvf_messages": len(kinds),
        "cvf_counts": {k: kinds.count(k) for k in ("PriorBlockage", "Blockage", "PostBlockage")},
        "ground_truth_blocked_frames": [blocked[0], blocked[-1]] if blocked else None,
        "mean_snr_db": means,
        "anticipation_scene_ms": transitions.anticipation_scene_ms,
        "agents": {r.kind: r.to_dict() for r in reports},
        "broker": {k: stats[k] for k in ("routed", "dropped_unmatched", "dropped_overflow", "delivered")},
    }
    if not normalize:
        s["anticipation_recv_ms"] = transitions.anticipation_ms
    return s


def write_outputs(result: UseCaseResult, out: Path, normalize: bool) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    tl = result.timeline
    paths = {
        "fused": out / "fused_timeline.csv",
        "events": out / "cvf_events.csv",
        "transitions": out / "transitions.json",
        "summary": out / "summary.json",
    }
    paths["fused"].write_text(tl.to_csv())
    paths["events"].write_text(tl.cvf_events_csv())
    tr = result.transitions.normalized(tl.interval_ms) if normalize else result.transitions
    paths["transitions"].write_text(tr.to_json())
    paths["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return paths


def offline_events_csv(spec: ScenarioSpec) -> str:
    """CVF event log computed without any transport, for cross-checking runs."""
    events = run_engine(spec.cvf, spec.scene, iter_frames(spec.scene, spec.n_frames))
    return events_to_csv(events, spec.scene.fps)


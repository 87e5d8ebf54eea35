"""Video-function engine: tracking history, constant-velocity prediction and the
Prior / Blockage / Post message state machine.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .geometry import Box2D, Point, boxes_overlap, segment_intersects_box
from .scene import Frame, SceneConfig

__all__ = [
    "TrackState", "EventKind", "CvfConfig", "CvfEvent", "ObstacleTrack", "CvfEngine",
    "estimate_velocity", "segment_intersects_box", "predict_prior", "events_to_csv",
    "OutOfOrderFrame", "run_engine",
]


class TrackState(enum.Enum):
    CLEAR = "clear"
    PRIOR = "prior"
    BLOCKED = "blocked"
    POST = "post"


class EventKind(enum.Enum):
    PRIOR_BLOCKAGE = "PriorBlockage"
    BLOCKAGE = "Blockage"
    POST_BLOCKAGE = "PostBlockage"


_ALLOWED = {
    (TrackState.CLEAR, TrackState.PRIOR),
    (TrackState.CLEAR, TrackState.BLOCKED),
    (TrackState.PRIOR, TrackState.CLEAR),
    (TrackState.PRIOR, TrackState.BLOCKED),
    (TrackState.BLOCKED, TrackState.POST),
    (TrackState.POST, TrackState.CLEAR),
    # re-contact while the post hold is still running starts a new blockage
    (TrackState.POST, TrackState.BLOCKED),
}


class OutOfOrderFrame(ValueError):
    pass


@dataclass(frozen=True)
class CvfConfig:
    window_frames: int = 5
    horizon_ms: int = 600
    post_hold_frames: int = 3
    fps: int = 5
    # Also raise Blockage when the box cuts the LoS away from the UE.
    los_counts_as_blockage: bool = False
    # Prediction target: "los+ue" (LoS segment or UE marker box) or "los".
    prior_target: str = "los+ue"

    def __post_init__(self) -> None:
        if self.window_frames < 2:
            raise ValueError("window_frames must be >= 2")
        if self.fps < 1:
            raise ValueError("fps must be >= 1")
        if self.horizon_ms * self.fps < 1000:
            raise ValueError("horizon_ms must cover at least one frame period")
        if self.prior_target not in ("los+ue", "los"):
            raise ValueError(f"unknown prior_target {self.prior_target!r}")

    @property
    def horizon_frames(self) -> int:
        return -(-self.horizon_ms * self.fps // 1000)

    @classmethod
    def from_dict(cls, d: dict) -> "CvfConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class CvfEvent:
    kind: EventKind
    obstacle_id: int
    frame_index: int
    box: Box2D | None
    time_to_block_ms: int | None = None


@dataclass
class ObstacleTrack:
    obstacle_id: int
    capacity: int
    history: deque = field(default_factory=deque)
    state: TrackState = TrackState.CLEAR
    post_frames_remaining: int = 0

    def __post_init__(self) -> None:
        self.history = deque(self.history, maxlen=self.capacity)

    def push(self, frame_index: int, box: Box2D) -> None:
        if self.history and frame_index <= self.history[-1][0]:
            raise OutOfOrderFrame(f"frame {frame_index} after {self.history[-1][0]}")
        self.history.append((frame_index, box.center, box))

    @property
    def last_box(self) -> Box2D:
        return self.history[-1][2]

    def transition(self, new: TrackState) -> None:
        if new is self.state:
            return
        if (self.state, new) not in _ALLOWED:
            raise RuntimeError(f"illegal track transition {self.state} -> {new}")
        self.state = new


def estimate_velocity(track: ObstacleTrack, fps: int) -> Point | None:
    """Two-point velocity over the window, in m/s; None with fewer than two entries."""
    if len(track.history) < 2:
        return None
    f0, c0, _ = track.history[0]
    f1, c1, _ = track.history[-1]
    dt = (f1 - f0) / fps
    return ((c1[0] - c0[0]) / dt, (c1[1] - c0[1]) / dt)


def predict_prior(track: ObstacleTrack, los_seg: tuple[Point, Point], config: CvfConfig,
                  ue_box: Box2D | None = None) -> int | None:
    """Milliseconds until the first future frame whose predicted box blocks, or None.

    The predicted box is tested against the LoS segment and, unless
    ``config.prior_target == "los"``, against the UE marker box too.
    """
    v = estimate_velocity(track, config.fps)
    if v is None:
        return None
    box = track.last_box
    p0, p1 = los_seg
    for h in range(1, config.horizon_frames + 1):
        moved = box.translated(v[0] * h / config.fps, v[1] * h / config.fps)
        hit = segment_intersects_box(p0, p1, moved)
        if not hit and ue_box is not None and config.prior_target == "los+ue":
            hit = boxes_overlap(moved, ue_box)
        if hit:
            return max(1, round(h * 1000 / config.fps))
    return None


class CvfEngine:
    """Stateful per-scene engine; feed frames in increasing index order."""

    def __init__(self, config: CvfConfig, gnb_pos: Point, ue_marker_box: Box2D | None = None):
        self.config = config
        self.gnb_pos = gnb_pos
        self.last_ue_box = ue_marker_box
        self.tracks: dict[int, ObstacleTrack] = {}
        self.last_frame: int | None = None

    @classmethod
    def for_scene(cls, config: CvfConfig, scene: SceneConfig) -> "CvfEngine":
        # The marker position is learned from frames, not from the scene script.
        return cls(config, scene.gnb_pos)

    def step(self, frame: Frame) -> list[CvfEvent]:
        if self.last_frame is not None and frame.frame_index <= self.last_frame:
            raise OutOfOrderFrame(f"frame {frame.frame_index} after {self.last_frame}")
        self.last_frame = frame.frame_index
        if frame.ue_marker is not None:
            self.last_ue_box = frame.ue_marker
        ue_box = self.last_ue_box
        seen = set()
        events: list[CvfEvent] = []
        for det in sorted(frame.detections, key=lambda d: d.obstacle_id):
            seen.add(det.obstacle_id)
            track = self.tracks.get(det.obstacle_id)
            if track is None:
                track = self.tracks[det.obstacle_id] = ObstacleTrack(det.obstacle_id, self.config.window_frames)
            track.push(frame.frame_index, det.box)
            ev = self._update(track, frame.frame_index, det.box, ue_box)
            if ev is not None:
                events.append(ev)
        for oid in sorted(set(self.tracks) - seen):
            track = self.tracks[oid]
            # A vanished obstacle no longer blocks anything.
            ev = self._release(track, frame.frame_index) if track.state in (TrackState.BLOCKED, TrackState.POST) else None
            if ev is not None:
                events.append(ev)
            if track.state is not TrackState.POST:
                del self.tracks[oid]
        events.sort(key=lambda e: e.obstacle_id)
        return events

    def _blocks(self, box: Box2D, ue_box: Box2D | None) -> bool:
        if ue_box is None:
            return False
        if boxes_overlap(box, ue_box):
            return True
        return self.config.los_counts_as_blockage and segment_intersects_box(self.gnb_pos, ue_box.center, box)

    def _release(self, track: ObstacleTrack, frame_index: int) -> CvfEvent | None:
        if track.state is TrackState.BLOCKED:
            track.transition(TrackState.POST)
            track.post_frames_remaining = self.config.post_hold_frames
        if track.post_frames_remaining == 0:
            track.transition(TrackState.CLEAR)
            return None
        track.post_frames_remaining -= 1
        ev = CvfEvent(EventKind.POST_BLOCKAGE, track.obstacle_id, frame_index, None)
        if track.post_frames_remaining == 0:
            track.transition(TrackState.CLEAR)
        return ev

    def _update(self, track: ObstacleTrack, frame_index: int, box: Box2D,
                ue_box: Box2D | None) -> CvfEvent | None:
        if self._blocks(box, ue_box):
            track.transition(TrackState.BLOCKED)
            return CvfEvent(EventKind.BLOCKAGE, track.obstacle_id, frame_index, box)
        if track.state in (TrackState.BLOCKED, TrackState.POST):
            return self._release(track, frame_index)
        ttb = None
        if ue_box is not None:
            ttb = predict_prior(track, (self.gnb_pos, ue_box.center), self.config, ue_box)
        if ttb is None:
            track.transition(TrackState.CLEAR)
            return None
        track.transition(TrackState.PRIOR)
        return CvfEvent(EventKind.PRIOR_BLOCKAGE, track.obstacle_id, frame_index, box, ttb)


def run_engine(config: CvfConfig, scene: SceneConfig, frames: Iterable[Frame]) -> list[CvfEvent]:
    engine = CvfEngine.for_scene(config, scene)
    out: list[CvfEvent] = []
    for f in frames:
        out.extend(engine.step(f))
    return out


def events_to_csv(events: Sequence[CvfEvent], fps: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_index", "time_s", "obstacle_id", "kind", "time_to_block_ms"])
    for e in events:
        w.writerow([e.frame_index, f"{e.frame_index / fps:.3f}", e.obstacle_id, e.kind.value,
                    "" if e.time_to_block_ms is None else e.time_to_block_ms])
    return buf.getvalue()

"""Synthetic top-down scene standing in for the camera and detector pipeline.

Obstacles follow piecewise constant-velocity scripts. A frame lists every
obstacle whose box touches the scene extent, plus the UE marker box unless an
obstacle currently covers it (marker occlusion).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .geometry import Box2D, Point, boxes_overlap, segment_intersects_box

__all__ = [
    "Box2D", "MotionSegment", "ObstacleSpec", "SceneConfig", "Detection", "Frame",
    "obstacle_box_at", "generate_frame", "iter_frames", "ground_truth_blocked",
    "blocked_at", "frames_to_csv", "load_scene_config", "canonical_scene",
]


@dataclass(frozen=True)
class MotionSegment:
    """Constant velocity from ``start_s`` until the next segment starts."""

    start_s: float
    velocity: Point


@dataclass(frozen=True)
class ObstacleSpec:
    id: int
    initial_box: Box2D
    segments: tuple[MotionSegment, ...] = ()

    def __post_init__(self) -> None:
        starts = [s.start_s for s in self.segments]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError(f"obstacle {self.id}: segment start times must be strictly increasing")

    @classmethod
    def linear(cls, id: int, initial_box: Box2D, velocity: Point,
               start_time_s: float = 0.0, stop_time_s: float | None = None) -> "ObstacleSpec":
        segs = [MotionSegment(start_time_s, velocity)]
        if stop_time_s is not None:
            segs.append(MotionSegment(stop_time_s, (0.0, 0.0)))
        return cls(id, initial_box, tuple(segs))

    def center_at(self, t: float) -> Point:
        x, y = self.initial_box.center
        for i, seg in enumerate(self.segments):
            if t <= seg.start_s:
                break
            end = self.segments[i + 1].start_s if i + 1 < len(self.segments) else math.inf
            dt = min(t, end) - seg.start_s
            x += seg.velocity[0] * dt
            y += seg.velocity[1] * dt
        return (x, y)


@dataclass(frozen=True)
class SceneConfig:
    gnb_pos: Point
    ue_marker_box: Box2D
    obstacles: tuple[ObstacleSpec, ...] = ()
    fps: int = 5
    extent: Point = (100.0, 100.0)
    origin: Point = (0.0, 0.0)
    ue_id: int = 1
    pixels_per_meter: float = 100.0

    def __post_init__(self) -> None:
        if self.fps < 1:
            raise ValueError("fps must be >= 1")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("extent must be positive")
        ids = [o.id for o in self.obstacles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"obstacle ids must be unique, got {ids}")
        ext = self.extent_box
        for o in self.obstacles:
            b = o.initial_box
            if b.xmin < ext.xmin or b.xmax > ext.xmax or b.ymin < ext.ymin or b.ymax > ext.ymax:
                raise ValueError(f"obstacle {o.id} initial box lies outside the scene extent")

    @property
    def extent_box(self) -> Box2D:
        w, h = self.extent
        return Box2D(self.origin[0] + w / 2, self.origin[1] + h / 2, w / 2, h / 2)

    @property
    def los_segment(self) -> tuple[Point, Point]:
        return (self.gnb_pos, self.ue_marker_box.center)

    def frame_time(self, frame_index: int) -> float:
        return frame_index / self.fps

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "gnb_pos": list(self.gnb_pos),
            "ue_id": self.ue_id,
            "ue_marker_box": _box_dict(self.ue_marker_box),
            "fps": self.fps,
            "extent": list(self.extent),
            "origin": list(self.origin),
            "pixels_per_meter": self.pixels_per_meter,
            "obstacles": [
                {
                    "id": o.id,
                    "initial_box": _box_dict(o.initial_box),
                    "segments": [
                        {"start_s": s.start_s, "velocity": list(s.velocity)} for s in o.segments
                    ],
                }
                for o in self.obstacles
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        obstacles = []
        for o in d.get("obstacles", []):
            box = _box_from(o["initial_box"])
            if "segments" in o:
                segs = tuple(MotionSegment(float(s["start_s"]), _pt(s["velocity"])) for s in o["segments"])
                obstacles.append(ObstacleSpec(int(o["id"]), box, segs))
            else:
                obstacles.append(ObstacleSpec.linear(
                    int(o["id"]), box, _pt(o.get("velocity", (0.0, 0.0))),
                    float(o.get("start_time_s", 0.0)),
                    None if o.get("stop_time_s") is None else float(o["stop_time_s"]),
                ))
        return cls(
            gnb_pos=_pt(d["gnb_pos"]),
            ue_marker_box=_box_from(d["ue_marker_box"]),
            obstacles=tuple(obstacles),
            fps=int(d.get("fps", 5)),
            extent=_pt(d.get("extent", (100.0, 100.0))),
            origin=_pt(d.get("origin", (0.0, 0.0))),
            ue_id=int(d.get("ue_id", 1)),
            pixels_per_meter=float(d.get("pixels_per_meter", 100.0)),
        )


def _pt(v: Sequence[float]) -> Point:
    if len(v) != 2:
        raise ValueError(f"expected a 2-vector, got {v!r}")
    return (float(v[0]), float(v[1]))


def _box_dict(b: Box2D) -> dict:
    return {"center": [b.cx, b.cy], "half_extent": [b.hx, b.hy]}


def _box_from(d: dict) -> Box2D:
    return Box2D.from_center(_pt(d["center"]), _pt(d["half_extent"]))


def load_scene_config(path: str | Path) -> SceneConfig:
    return SceneConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Detection:
    obstacle_id: int
    box: Box2D


@dataclass(frozen=True)
class Frame:
    frame_index: int
    time_s: float
    detections: tuple[Detection, ...] = field(default=())
    ue_marker: Box2D | None = None


def obstacle_box_at(obstacle: ObstacleSpec, t: float) -> Box2D:
    return obstacle.initial_box.moved_to(obstacle.center_at(t))


def generate_frame(config: SceneConfig, frame_index: int) -> Frame:
    if frame_index < 0:
        raise ValueError("frame_index must be >= 0")
    t = config.frame_time(frame_index)
    ext = config.extent_box
    dets = []
    occluded = False
    for o in sorted(config.obstacles, key=lambda o: o.id):
        box = obstacle_box_at(o, t)
        if not boxes_overlap(box, ext, tol=0.0):
            continue
        dets.append(Detection(o.id, box))
        if boxes_overlap(box, config.ue_marker_box):
            occluded = True
    return Frame(frame_index, t, tuple(dets), None if occluded else config.ue_marker_box)


def iter_frames(config: SceneConfig, n_frames: int, start: int = 0) -> Iterator[Frame]:
    for k in range(start, start + n_frames):
        yield generate_frame(config, k)


def blocked_at(config: SceneConfig, t: float) -> bool:
    """Physical ground truth at scene time ``t``: LoS cut or UE marker covered."""
    p0, p1 = config.los_segment
    for o in config.obstacles:
        box = obstacle_box_at(o, t)
        if segment_intersects_box(p0, p1, box) or boxes_overlap(box, config.ue_marker_box):
            return True
    return False


def ground_truth_blocked(config: SceneConfig, frame_index: int) -> dict[int, bool]:
    return {config.ue_id: blocked_at(config, config.frame_time(frame_index))}


def frames_to_csv(config: SceneConfig, frames: Sequence[Frame]) -> str:
    """Debug export of a frame stream, one row per object per frame."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_index", "time_s", "object", "id", "cx_m", "cy_m", "hx_m", "hy_m", "cx_px", "cy_px"])
    ppm = config.pixels_per_meter
    for f in frames:
        rows = [("obstacle", d.obstacle_id, d.box) for d in f.detections]
        if f.ue_marker is not None:
            rows.append(("ue_marker", config.ue_id, f.ue_marker))
        for obj, oid, b in rows:
            w.writerow([f.frame_index, repr(f.time_s), obj, oid, repr(b.cx), repr(b.cy),
                        repr(b.hx), repr(b.hy), round((b.cx - config.origin[0]) * ppm),
                        round((b.cy - config.origin[1]) * ppm)])
    return buf.getvalue()


def canonical_scene() -> SceneConfig:
    """Single obstacle that walks onto the UE, waits there for 4 s, and walks back.

    gNB at the origin, UE marker centred 10 m away. The 1 m obstacle starts 4 m
    off the LoS and moves at 1 m/s, so every contact time is a multiple of
    0.1 s and lands on or between frames of the 5 fps grid.
    """
    obstacle = ObstacleSpec(
        1,
        Box2D(10.0, 4.0, 0.5, 0.5),
        (
            MotionSegment(0.0, (0.0, -1.0)),
            MotionSegment(4.0, (0.0, 0.0)),
            MotionSegment(8.0, (0.0, 1.0)),
        ),
    )
    return SceneConfig(
        gnb_pos=(0.0, 0.0),
        ue_marker_box=Box2D(10.0, 0.0, 0.3, 0.3),
        obstacles=(obstacle,),
        fps=5,
        extent=(13.0, 12.0),
        origin=(-1.0, -6.0),
        ue_id=1,
    )

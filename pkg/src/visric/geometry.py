"""Planar geometry shared by the scene generator and the video-function engine.

All coordinates are metres in a top-down 2D plane. Boxes are axis-aligned and
closed; touching boundaries count as contact. Comparisons use a small absolute
tolerance so that contacts which are exact in real arithmetic (and therefore
appear in closed-form test oracles) survive floating point rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

Point = tuple[float, float]

#: Absolute contact tolerance in metres, far below any physically meaningful size.
GEOM_TOL = 1e-9


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned box given by its center and half extents."""

    cx: float
    cy: float
    hx: float
    hy: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "hx", "hy"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Box2D.{name} must be finite")
        if self.hx <= 0 or self.hy <= 0:
            raise ValueError(f"Box2D half extents must be positive, got ({self.hx}, {self.hy})")

    @classmethod
    def from_center(cls, center: Point, half: Point) -> "Box2D":
        return cls(float(center[0]), float(center[1]), float(half[0]), float(half[1]))

    @property
    def center(self) -> Point:
        return (self.cx, self.cy)

    @property
    def half_extent(self) -> Point:
        return (self.hx, self.hy)

    @property
    def xmin(self) -> float:
        return self.cx - self.hx

    @property
    def xmax(self) -> float:
        return self.cx + self.hx

    @property
    def ymin(self) -> float:
        return self.cy - self.hy

    @property
    def ymax(self) -> float:
        return self.cy + self.hy

    def translated(self, dx: float, dy: float) -> "Box2D":
        return Box2D(self.cx + dx, self.cy + dy, self.hx, self.hy)

    def moved_to(self, center: Point) -> "Box2D":
        return Box2D(float(center[0]), float(center[1]), self.hx, self.hy)

    def contains_point(self, p: Point, tol: float = GEOM_TOL) -> bool:
        return (
            self.xmin - tol <= p[0] <= self.xmax + tol
            and self.ymin - tol <= p[1] <= self.ymax + tol
        )


def boxes_overlap(a: Box2D, b: Box2D, tol: float = GEOM_TOL) -> bool:
    """Closed box-box intersection test."""
    return (
        abs(a.cx - b.cx) <= a.hx + b.hx + tol
        and abs(a.cy - b.cy) <= a.hy + b.hy + tol
    )


def segment_intersects_box(p0: Point, p1: Point, box: Box2D, tol: float = GEOM_TOL) -> bool:
    """Return True iff the closed segment p0-p1 meets the closed box.

    Liang-Barsky clipping of the parametric segment against the four slabs of
    the box (grown by ``tol``).
    """
    if p0[0] == p1[0] and p0[1] == p1[1]:
        raise ValueError("degenerate segment: p0 == p1")
    t_lo, t_hi = 0.0, 1.0
    for start, delta, lo, hi in (
        (p0[0], p1[0] - p0[0], box.xmin - tol, box.xmax + tol),
        (p0[1], p1[1] - p0[1], box.ymin - tol, box.ymax + tol),
    ):
        if delta == 0.0:
            if start < lo or start > hi:
                return False
            continue
        t_a = (lo - start) / delta
        t_b = (hi - start) / delta
        if t_a > t_b:
            t_a, t_b = t_b, t_a
        t_lo = max(t_lo, t_a)
        t_hi = min(t_hi, t_b)
        if t_lo > t_hi:
            return False
    return True

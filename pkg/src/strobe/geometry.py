"""Poses, boxes, label tracks and rotated-box overlap in the BEV plane.

Timestamps are plain ``int`` microseconds since scenario start.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

PACKET_US = 10_000
SWEEP_US = 100_000

# Fixed disc radius standing in for a pedestrian footprint.
PEDESTRIAN_RADIUS = 0.4


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if -math.pi < a <= math.pi:
        return a
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


class ClassId(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "ClassId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown class {name!r}") from None


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def apply(self, x: float, y: float) -> tuple[float, float]:
        """Map a point from this pose's local frame to the parent frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return self.x + c * x - s * y, self.y + s * x + c * y


IDENTITY = Pose2()


def pose_compose(a: Pose2, b: Pose2) -> Pose2:
    """Rigid composition ``a o b``: ``b`` expressed in ``a``'s frame, lifted to ``a``'s parent."""
    x, y = a.apply(b.x, b.y)
    return Pose2(x, y, a.yaw + b.yaw)


def relative_pose(frame: Pose2, pose: Pose2) -> Pose2:
    """``pose`` expressed in the local frame of ``frame``."""
    return pose_compose(frame.inverse(), pose)


@dataclass(frozen=True)
class DetBox:
    cls: ClassId
    cx: float
    cy: float
    length: Optional[float] = None
    width: Optional[float] = None
    heading: Optional[float] = None
    score: float = 1.0
    emitted_at: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.cls == ClassId.PEDESTRIAN:
            if self.length is not None or self.width is not None or self.heading is not None:
                raise ValueError("pedestrian boxes carry only a centroid and a score")
        else:
            if self.length is None or self.width is None or self.heading is None:
                raise ValueError(f"{self.cls.label} boxes need length, width and heading")
            if self.length <= 0 or self.width <= 0:
                raise ValueError("box dims must be positive")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.length, self.width, self.heading)


@dataclass(frozen=True)
class TrackState:
    t: int
    pose: Pose2
    velocity: tuple[float, float] = (0.0, 0.0)
    yaw_rate: float = 0.0


class TrackRangeError(ValueError):
    pass


@dataclass(frozen=True)
class LabelTrack:
    """Continuous-time actor trajectory with constant dims."""

    actor_id: int
    cls: ClassId
    length: float
    width: float
    states: tuple[TrackState, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.states:
            raise ValueError("a track needs at least one state")
        times = [s.t for s in self.states]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("track states must be sorted by time")
        object.__setattr__(self, "_times", times)

    @property
    def t_first(self) -> int:
        return self.states[0].t

    @property
    def t_last(self) -> int:
        return self.states[-1].t

    def alive(self, t: int) -> bool:
        return self.t_first <= t <= self.t_last


def track_state_at(track: LabelTrack, t: int, horizon: int = PACKET_US) -> tuple[Pose2, tuple[float, float]]:
    """Pose and (length, width) of ``track`` at time ``t``.

    Extrapolates with constant velocity and constant yaw rate from the latest
    stored state at or before ``t`` (the first state when ``t`` precedes it).
    Queries further than ``horizon`` outside the stored span raise
    :class:`TrackRangeError`.
    """
    if t < track.t_first - horizon or t > track.t_last + horizon:
        raise TrackRangeError(
            f"t={t} outside track {track.actor_id} span [{track.t_first}, {track.t_last}]"
        )
    i = max(bisect.bisect_right(track._times, t) - 1, 0)
    s = track.states[i]
    dims = (track.length, track.width)
    if t == s.t:
        return s.pose, dims
    dt = (t - s.t) * 1e-6
    pose = Pose2(
        s.pose.x + s.velocity[0] * dt,
        s.pose.y + s.velocity[1] * dt,
        s.pose.yaw + s.yaw_rate * dt,
    )
    return pose, dims


# Rotated rectangles are (cx, cy, length, width, heading); length runs along heading.

def box_corners(box: Sequence[float]) -> list[tuple[float, float]]:
    cx, cy, l, w, h = box
    c, s = math.cos(h), math.sin(h)
    hl, hw = 0.5 * l, 0.5 * w
    return [
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject, clipper):
    """Sutherland-Hodgman clip of ``subject`` by a counter-clockwise convex ``clipper``."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two oriented rectangles."""
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_convex(box_corners(a), box_corners(b)))
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def centroid_distance(a: DetBox, b: Pose2) -> float:
    return math.hypot(a.cx - b.x, a.cy - b.y)

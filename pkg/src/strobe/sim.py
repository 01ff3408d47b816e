"""Deterministic rolling-shutter LiDAR simulator.

A 10 Hz spinning sensor emits ten 36 degree sector packets per revolution
(100 Hz). Rays are cast per azimuth column at the column's own timestamp, so
both the ego vehicle and the actors move while a packet is being acquired.
Actors are extruded rectangles; the ground is the plane ``z = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterator, Optional

import numpy as np

from .geometry import (
    PACKET_US,
    ClassId,
    LabelTrack,
    Pose2,
    TrackState,
    track_state_at,
)

CLASS_HEIGHT = {ClassId.VEHICLE: 1.8, ClassId.PEDESTRIAN: 1.7, ClassId.CYCLIST: 1.6}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSpec:
    spin_rate_hz: float = 10.0
    packets_per_sweep: int = 10
    elevations_deg: tuple[float, ...] = tuple(np.linspace(-15.0, 5.0, 32).tolist())
    azimuth_step_deg: float = 0.2
    max_range: float = 70.0
    dropout: float = 0.0
    mount_height: float = 1.8

    @property
    def sector_rad(self) -> float:
        return 2.0 * math.pi / self.packets_per_sweep

    @property
    def columns_per_packet(self) -> int:
        return int(round(360.0 / self.packets_per_sweep / self.azimuth_step_deg))

    def validate(self):
        if self.spin_rate_hz * self.packets_per_sweep != 100.0:
            raise ConfigError("spin_rate_hz * packets_per_sweep must equal the 100 Hz packet rate")
        if not self.elevations_deg:
            raise ConfigError("sensor needs at least one beam")
        if self.azimuth_step_deg <= 0 or self.max_range <= 0:
            raise ConfigError("azimuth_step_deg and max_range must be positive")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError("dropout must lie in [0, 1]")


@dataclass(frozen=True)
class EgoSpec:
    """Ego path: polyline of waypoints driven at constant speed, then parked at the end."""

    waypoints: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    speed: float = 0.0
    yaw: float = 0.0

    def validate(self):
        if self.speed < 0:
            raise ConfigError("ego speed must be non-negative")
        if not self.waypoints:
            raise ConfigError("ego needs at least one waypoint")

    def _segments(self):
        pts = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        keep = lengths > 0
        return pts[:-1][keep], seg[keep], lengths[keep]

    def poses_at(self, t_us) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.asarray(t_us, dtype=np.float64) * 1e-6
        starts, seg, lengths = self._segments()
        if len(lengths) == 0 or self.speed == 0:
            p0 = self.waypoints[0]
            yaw = self.yaw if len(lengths) == 0 else math.atan2(seg[0, 1], seg[0, 0])
            return (np.full(t.shape, float(p0[0])), np.full(t.shape, float(p0[1])),
                    np.full(t.shape, yaw))
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        s = np.clip(self.speed * t, 0.0, cum[-1])
        i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
        frac = (s - cum[i]) / lengths[i]
        x = starts[i, 0] + frac * seg[i, 0]
        y = starts[i, 1] + frac * seg[i, 1]
        yaw = np.arctan2(seg[i, 1], seg[i, 0])
        return x, y, yaw

    def pose_at(self, t_us: int) -> Pose2:
        x, y, yaw = self.poses_at(np.array([t_us]))
        return Pose2(float(x[0]), float(y[0]), float(yaw[0]))


@dataclass(frozen=True)
class ActorSpec:
    actor_id: int
    cls: ClassId
    length: float
    width: float
    x: float
    y: float
    yaw: float = 0.0
    speed: float = 0.0
    yaw_rate: float = 0.0
    spawn: float = 0.0
    despawn: Optional[float] = None

    def validate(self):
        if self.length <= 0 or self.width <= 0:
            raise ConfigError(f"actor {self.actor_id}: dims must be positive")
        if self.speed < 0:
            raise ConfigError(f"actor {self.actor_id}: speed must be non-negative")
        if self.despawn is not None and self.despawn < self.spawn:
            raise ConfigError(f"actor {self.actor_id}: despawn precedes spawn")


@dataclass(frozen=True)
class MapSpec:
    roads: tuple[tuple[tuple[float, float], ...], ...] = ()
    crosswalks: tuple[tuple[tuple[float, float], ...], ...] = ()

    @property
    def layers(self):
        return (self.roads, self.crosswalks)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    duration: float = 1.0
    ego: EgoSpec = field(default_factory=EgoSpec)
    actors: tuple[ActorSpec, ...] = ()
    map: MapSpec = field(default_factory=MapSpec)
    sensor: SensorSpec = field(default_factory=SensorSpec)

    def validate(self):
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        self.ego.validate()
        self.sensor.validate()
        ids = [a.actor_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ConfigError("actor ids must be unique")
        for a in self.actors:
            a.validate()

    @property
    def n_packets(self) -> int:
        return int(round(self.duration * 100))

    @property
    def t_end_us(self) -> int:
        return self.n_packets * PACKET_US

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actors"] = [dict(a, cls=ClassId(a["cls"]).label) for a in d["actors"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        try:
            ego = EgoSpec(**_tuplify(d.pop("ego", {})))
            sensor = SensorSpec(**_tuplify(d.pop("sensor", {})))
            m = d.pop("map", {})
            map_ = MapSpec(
                roads=_polys(m.get("roads", ())), crosswalks=_polys(m.get("crosswalks", ()))
            )
            actors = []
            for a in d.pop("actors", ()):
                a = dict(a)
                a["cls"] = ClassId.parse(a["cls"]) if isinstance(a["cls"], str) else ClassId(a["cls"])
                actors.append(ActorSpec(**a))
            cfg = cls(ego=ego, sensor=sensor, map=map_, actors=tuple(actors), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


def _tuplify(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[k] = v
    return out


def _polys(ps) -> tuple:
    return tuple(tuple((float(x), float(y)) for x, y in p) for p in ps)


@dataclass(frozen=True, eq=False)
class Packet:
    """One sector of returns. Points are world-frame float32, times absolute microseconds."""

    index: int
    t_start: int
    t_end: int
    ego_pose: Pose2
    points: np.ndarray
    times: np.ndarray
    azimuth_start: float
    azimuth_end: float

    @property
    def sweep(self) -> int:
        return self.t_start // (PACKET_US * 10)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, Packet):
            return NotImplemented
        return (
            (self.index, self.t_start, self.t_end, self.ego_pose, self.azimuth_start, self.azimuth_end)
            == (other.index, other.t_start, other.t_end, other.ego_pose, other.azimuth_start, other.azimuth_end)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.times, other.times)
        )


@dataclass(frozen=True)
class Label:
    actor_id: int
    cls: ClassId
    pose: Pose2
    length: float
    width: float

    @property
    def box(self) -> tuple[float, float, float, float, float]:
        return (self.pose.x, self.pose.y, self.length, self.width, self.pose.yaw)


@dataclass(frozen=True, eq=False)
class SimFrame:
    packet: Packet
    labels: tuple[Label, ...]
    observed: dict  # actor_id -> latest return time (us) inside this packet
    hit_ids: np.ndarray  # per point actor id, -1 for ground
    map: MapSpec


def build_tracks(cfg: ScenarioConfig) -> list[LabelTrack]:
    tracks = []
    end = cfg.duration if cfg.duration else 0.0
    for a in cfg.actors:
        t0 = int(round(a.spawn * 1e6))
        t1 = int(round((a.despawn if a.despawn is not None else end) * 1e6))
        v = (a.speed * math.cos(a.yaw), a.speed * math.sin(a.yaw))
        first = TrackState(t0, Pose2(a.x, a.y, a.yaw), v, a.yaw_rate)
        states = [first]
        if t1 > t0:
            dt = (t1 - t0) * 1e-6
            p1 = Pose2(a.x + v[0] * dt, a.y + v[1] * dt, a.yaw + a.yaw_rate * dt)
            states.append(TrackState(t1, p1, v, a.yaw_rate))
        tracks.append(LabelTrack(a.actor_id, a.cls, a.length, a.width, tuple(states)))
    return tracks


def _track_poses(track: LabelTrack, t: np.ndarray):
    """Vectorized track_state_at over column times, plus an alive mask."""
    times = np.array([s.t for s in track.states])
    i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
    st = track.states
    x0 = np.array([s.pose.x for s in st])[i]
    y0 = np.array([s.pose.y for s in st])[i]
    yaw0 = np.array([s.pose.yaw for s in st])[i]
    vx = np.array([s.velocity[0] for s in st])[i]
    vy = np.array([s.velocity[1] for s in st])[i]
    w = np.array([s.yaw_rate for s in st])[i]
    dt = (t - times[i]) * 1e-6
    alive = (t >= track.t_first) & (t <= track.t_last)
    return x0 + vx * dt, y0 + vy * dt, yaw0 + w * dt, alive


def ray_box_distance(ox, oy, oz, dx, dy, dz, cx, cy, yaw, length, width, height):
    """Entry distance of rays into extruded rectangles; ``inf`` on miss.

    Rays starting inside a box are treated as misses.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    rx, ry = ox - cx, oy - cy
    lox, loy = c * rx + s * ry, -s * rx + c * ry
    ldx, ldy = c * dx + s * dy, -s * dx + c * dy
    lo = np.stack([lox, loy, oz + 0 * lox])
    ld = np.stack([ldx, ldy, dz + 0 * ldx])
    half = np.array([0.5 * length, 0.5 * width])
    lower = np.array([-half[0], -half[1], 0.0])[:, None]
    upper = np.array([half[0], half[1], height])[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lower - lo) / ld
        t2 = (upper - lo) / ld
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # parallel rays outside the slab never hit
    parallel_out = (ld == 0) & ((lo < lower) | (lo > upper))
    near = tmin.max(axis=0)
    far = tmax.min(axis=0)
    hit = (near <= far) & (near > 1e-9) & ~parallel_out.any(axis=0)
    return np.where(hit, near, np.inf)


def cast_rays(origins, dirs, t_ray, tracks, max_range):
    """First-hit ray casting at per-ray timestamps.

    Returns (hit points float64 (M,3), kept ray indices, actor id per hit or -1 for ground).
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dirs[:, 2] < 0, -origins[:, 2] / dirs[:, 2], np.inf)
    best = np.minimum(best, tg)
    for tr in tracks:
        x, y, yaw, alive = _track_poses(tr, t_ray)
        if not alive.any():
            continue
        d = ray_box_distance(
            origins[:, 0], origins[:, 1], origins[:, 2], dirs[:, 0], dirs[:, 1], dirs[:, 2],
            x, y, yaw, tr.length, tr.width, CLASS_HEIGHT[tr.cls],
        )
        d = np.where(alive, d, np.inf)
        closer = d < best
        best = np.where(closer, d, best)
        owner = np.where(closer, tr.actor_id, owner)
    keep = np.nonzero(best <= max_range)[0]
    pts = origins[keep] + best[keep, None] * dirs[keep]
    return pts, keep, owner[keep]


def packet_rays(cfg: ScenarioConfig, p: int):
    """Origins, unit directions and integer timestamps of every ray of global packet ``p``."""
    sensor = cfg.sensor
    k = p % sensor.packets_per_sweep
    t_start = p * PACKET_US
    sweep_start = (p - k) * PACKET_US
    ncol = sensor.columns_per_packet
    cols = np.arange(ncol)
    t_col = t_start + (cols * PACKET_US) // ncol
    _, _, yaw0 = cfg.ego.poses_at(np.array([sweep_start]))
    az = yaw0[0] + k * sensor.sector_rad + np.deg2rad(sensor.azimuth_step_deg) * cols
    ex, ey, _ = cfg.ego.poses_at(t_col)
    el = np.deg2rad(np.asarray(sensor.elevations_deg, dtype=np.float64))
    nb = len(el)
    # column-major: all beams of column 0, then column 1, ...
    az_r = np.repeat(az, nb)
    el_r = np.tile(el, ncol)
    dirs = np.stack([np.cos(el_r) * np.cos(az_r), np.cos(el_r) * np.sin(az_r), np.sin(el_r)], axis=1)
    origins = np.stack(
        [np.repeat(ex, nb), np.repeat(ey, nb), np.full(ncol * nb, sensor.mount_height)], axis=1
    )
    t_ray = np.repeat(t_col, nb).astype(np.int64)
    span = (yaw0[0] + k * sensor.sector_rad, yaw0[0] + (k + 1) * sensor.sector_rad)
    return origins, dirs, t_ray, span


def generate_scenario(cfg: ScenarioConfig) -> Iterator[SimFrame]:
    """Yield one :class:`SimFrame` per packet, in acquisition order."""
    cfg.validate()
    tracks = build_tracks(cfg)
    rng = np.random.default_rng(cfg.seed)
    seen: set[int] = set()
    ppsw = cfg.sensor.packets_per_sweep
    for p in range(cfg.n_packets):
        origins, dirs, t_ray, span = packet_rays(cfg, p)
        # one uniform per ray, always drawn: coupled across dropout settings
        u = rng.random(len(dirs))
        live = np.nonzero(u >= cfg.sensor.dropout)[0]
        pts, keep, owner = cast_rays(origins[live], dirs[live], t_ray[live], tracks, cfg.sensor.max_range)
        times = t_ray[live][keep]
        t_start, t_end = p * PACKET_US, (p + 1) * PACKET_US
        observed = {}
        for aid in np.unique(owner[owner >= 0]).tolist():
            observed[aid] = int(times[owner == aid].max())
        seen.update(observed)
        labels = tuple(
            _label(tr, t_end) for tr in tracks if tr.actor_id in seen and tr.alive(t_end)
        )
        points = np.ascontiguousarray(pts, dtype=np.float32)
        points.setflags(write=False)
        times.setflags(write=False)
        packet = Packet(
            index=p % ppsw,
            t_start=t_start,
            t_end=t_end,
            ego_pose=cfg.ego.pose_at(t_end),
            points=points,
            times=times,
            azimuth_start=float(span[0]),
            azimuth_end=float(span[1]),
        )
        yield SimFrame(packet, labels, observed, owner, cfg.map)


def _label(track: LabelTrack, t: int) -> Label:
    pose, (l, w) = track_state_at(track, t)
    return Label(track.actor_id, track.cls, pose, l, w)


def labels_at(tracks, t: int, only: Optional[set] = None) -> list[Label]:
    """Boxes of every live actor at time ``t`` (optionally restricted to ids in ``only``)."""
    out = []
    for tr in tracks:
        if only is not None and tr.actor_id not in only:
            continue
        if tr.alive(t):
            out.append(_label(tr, t))
    return out


def simulate(cfg: ScenarioConfig) -> list[SimFrame]:
    return list(generate_scenario(cfg))

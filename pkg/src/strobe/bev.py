"""Bird's-eye-view rasterization, packet regions and ego-motion realignment."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose2, relative_pose
from . import tensor as T


@dataclass(frozen=True)
class GridSpec:
    """Ego-centred BEV grid; cell ``(row, col)`` covers ``origin + (col, row) * resolution``."""

    extent_x: float = 144.0
    extent_y: float = 144.0
    resolution: float = 0.2
    z_min: float = -2.0
    z_max: float = 4.0
    z_step: float = 0.2

    @property
    def width(self) -> int:
        return int(round(self.extent_x / self.resolution))

    @property
    def height(self) -> int:
        return int(round(self.extent_y / self.resolution))

    @property
    def z_bins(self) -> int:
        return int(round((self.z_max - self.z_min) / self.z_step))

    @property
    def origin(self) -> tuple[float, float]:
        return (-0.5 * self.extent_x, -0.5 * self.extent_y)

    def at_scale(self, s: int) -> "GridSpec":
        return replace(self, resolution=self.resolution * 2 ** s)

    @classmethod
    def toy(cls, extent: float = 51.2) -> "GridSpec":
        return cls(extent_x=extent, extent_y=extent)


@dataclass(frozen=True, eq=False)
class BevGrid:
    origin: tuple[float, float]
    resolution: float
    data: np.ndarray  # (channels, height, width)
    frame_pose: Pose2

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame x, y of every cell centre, each shaped (height, width)."""
        ox, oy = self.origin
        xs = ox + (np.arange(self.width) + 0.5) * self.resolution
        ys = oy + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class RegionRect:
    """End-exclusive cell rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"empty region {self}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.y1 - self.y0, self.x1 - self.x0)

    def scaled(self, s: int) -> "RegionRect":
        k = 2 ** s
        if any(v % k for v in (self.x0, self.y0, self.x1, self.y1)):
            raise ValueError(f"{self} not aligned to scale {s}")
        return RegionRect(self.x0 // k, self.y0 // k, self.x1 // k, self.y1 // k)

    def expanded(self, halo: int, width: int, height: int) -> "RegionRect":
        return RegionRect(
            max(self.x0 - halo, 0), max(self.y0 - halo, 0),
            min(self.x1 + halo, width), min(self.y1 + halo, height),
        )

    def union(self, other: "RegionRect") -> "RegionRect":
        return RegionRect(min(self.x0, other.x0), min(self.y0, other.y0),
                          max(self.x1, other.x1), max(self.y1, other.y1))

    def contains(self, col, row) -> np.ndarray:
        col, row = np.asarray(col), np.asarray(row)
        return (col >= self.x0) & (col < self.x1) & (row >= self.y0) & (row < self.y1)

    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def _index(v, lo, step):
    # round first so coordinates on exact cell boundaries survive float noise
    return np.floor(np.round((v - lo) / step, 9)).astype(np.int64)


def points_to_cells(points_world: np.ndarray, frame_pose: Pose2, spec: GridSpec):
    """Voxel indices (col, row, zbin) of the in-grid points, expressed in ``frame_pose``."""
    p = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    inv = frame_pose.inverse()
    c, s = math.cos(inv.yaw), math.sin(inv.yaw)
    x = inv.x + c * p[:, 0] - s * p[:, 1]
    y = inv.y + s * p[:, 0] + c * p[:, 1]
    ox, oy = spec.origin
    col = _index(x, ox, spec.resolution)
    row = _index(y, oy, spec.resolution)
    zb = _index(p[:, 2], spec.z_min, spec.z_step)
    ok = (col >= 0) & (col < spec.width) & (row >= 0) & (row < spec.height) & (zb >= 0) & (zb < spec.z_bins)
    return col[ok], row[ok], zb[ok]


def voxelize_points(points_world, frame_pose: Pose2, spec: GridSpec, dtype=np.float32) -> BevGrid:
    col, row, zb = points_to_cells(points_world, frame_pose, spec)
    data = np.zeros((spec.z_bins, spec.height, spec.width), dtype=dtype)
    data[zb, row, col] = 1.0
    return BevGrid(spec.origin, spec.resolution, data, frame_pose)


def voxelize_packet(packet, spec: GridSpec, dtype=np.float32) -> BevGrid:
    """Binary occupancy with height bins as channels, in the packet's ego frame."""
    return voxelize_points(packet.points, packet.ego_pose, spec, dtype)


def _inside(px, py, poly) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorized over points."""
    poly = np.asarray(poly, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xc)
    return inside


def rasterize_map(hd_map, frame_pose: Pose2, spec: GridSpec, dtype=np.float32) -> BevGrid:
    """One binary channel per map layer (road, crosswalk) sampled at cell centres."""
    data = _map_raster(hd_map, frame_pose, spec).astype(dtype)
    return BevGrid(spec.origin, spec.resolution, data, frame_pose)


@functools.lru_cache(maxsize=16)
def _map_raster(hd_map, frame_pose: Pose2, spec: GridSpec) -> np.ndarray:
    layers = hd_map.layers
    grid = BevGrid(spec.origin, spec.resolution,
                   np.zeros((len(layers), spec.height, spec.width), dtype=np.float32), frame_pose)
    ex, ey = grid.cell_centers()
    c, s = math.cos(frame_pose.yaw), math.sin(frame_pose.yaw)
    wx = frame_pose.x + c * ex - s * ey
    wy = frame_pose.y + s * ex + c * ey
    for k, polys in enumerate(layers):
        for poly in polys:
            grid.data[k][_inside(wx, wy, poly)] = 1.0
    grid.data.setflags(write=False)
    return grid.data


def compute_region(cols, rows, halo: int, stride: int, width: int, height: int):
    """Smallest stride-aligned rectangle holding every cell plus ``halo``; ``None`` if no cells."""
    cols = np.asarray(cols)
    rows = np.asarray(rows)
    if cols.size == 0:
        return None
    if width % stride or height % stride:
        raise ValueError("grid dims must be multiples of the stride")
    x0 = max(int(cols.min()) - halo, 0) // stride * stride
    y0 = max(int(rows.min()) - halo, 0) // stride * stride
    x1 = min(-(-(int(cols.max()) + 1 + halo) // stride) * stride, width)
    y1 = min(-(-(int(rows.max()) + 1 + halo) // stride) * stride, height)
    return RegionRect(x0, y0, x1, y1)


def realign_affine(grid_origin, resolution, frame_pose: Pose2, new_pose: Pose2) -> np.ndarray:
    """2x3 map from output pixel (col, row) in ``new_pose`` to source pixel in ``frame_pose``."""
    rel = relative_pose(frame_pose, new_pose)
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    if rel.yaw == 0.0:
        c, s = 1.0, 0.0
    ox = 0.5 + grid_origin[0] / resolution
    oy = 0.5 + grid_origin[1] / resolution
    tx, ty = rel.x / resolution, rel.y / resolution
    return np.array([
        [c, -s, (c - 1.0) * ox - s * oy + tx],
        [s, c, s * ox + (c - 1.0) * oy + ty],
    ])


def is_identity(frame_pose: Pose2, new_pose: Pose2) -> bool:
    return frame_pose == new_pose


def realign_tensor(x: T.Tensor, origin, resolution, frame_pose: Pose2, new_pose: Pose2) -> T.Tensor:
    if is_identity(frame_pose, new_pose):
        return x
    return T.bilinear_warp(x, realign_affine(origin, resolution, frame_pose, new_pose))


def realign_grid(grid: BevGrid, new_pose: Pose2) -> BevGrid:
    """Resample ``grid`` into a grid axis-aligned to ``new_pose``; outside reads as zero."""
    if is_identity(grid.frame_pose, new_pose):
        return BevGrid(grid.origin, grid.resolution, grid.data.copy(), new_pose)
    out = realign_tensor(T.Tensor(grid.data), grid.origin, grid.resolution, grid.frame_pose, new_pose)
    return BevGrid(grid.origin, grid.resolution, out.data, new_pose)


def dump_grid(grid: BevGrid, path):
    """Debug dump: little-endian header (channels, height, width as u32, resolution f64) + f32 data."""
    header = np.array([grid.channels, grid.height, grid.width], dtype="<u4").tobytes()
    header += np.array([grid.resolution], dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())

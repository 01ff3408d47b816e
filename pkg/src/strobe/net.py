"""Streaming detector: regional convolutions over a multi-scale spatial memory.

Each packet is voxelized, the stride-aligned rectangle around its points is
computed, and only that rectangle runs through the LiDAR backbone, the memory
update, the map backbone, the fusion block and the header. Memory grids
outside the rectangle are never written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .bev import (
    GridSpec,
    RegionRect,
    compute_region,
    points_to_cells,
    rasterize_map,
    realign_tensor,
    voxelize_points,
)
from .geometry import ClassId, DetBox, Pose2, pose_compose
from .sim import Packet

N_SCALES = 4


@dataclass(frozen=True)
class ArchConfig:
    lidar_layers: tuple[int, ...] = (2, 2, 3, 6)
    lidar_channels: tuple[int, ...] = (24, 64, 128, 256)
    map_layers: tuple[int, ...] = (2, 2, 3, 3)
    map_channels: tuple[int, ...] = (16, 32, 64, 128)
    fusion_layers: int = 4
    fusion_channels: int = 256
    header_channels: int = 256
    map_inputs: int = 2
    halo: int = 8
    region_halo: int = 8
    stride: int = 8
    score_threshold: float = 0.1
    max_candidates: int = 200
    grid: GridSpec = field(default_factory=GridSpec)

    @classmethod
    def toy(cls, **kw) -> "ArchConfig":
        base = dict(
            lidar_layers=(2, 2, 3, 6),
            lidar_channels=(8, 16, 24, 32),
            map_layers=(2, 2, 3, 3),
            map_channels=(4, 8, 8, 16),
            fusion_channels=32,
            header_channels=32,
            grid=GridSpec.toy(),
        )
        base.update(kw)
        return cls(**base)

    def halo_at(self, s: int) -> int:
        return self.halo >> s

    @property
    def fused_scale(self) -> int:
        return 2

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        grid = GridSpec(**d.pop("grid", {}))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(grid=grid, **d)


def groups_for(c: int) -> int:
    """Eight channels per GroupNorm group; a single group when that does not divide."""
    return c // 8 if c % 8 == 0 else 1


# header output layout: per class a logit followed by regression channels
HEADER_LAYOUT = {
    ClassId.VEHICLE: (0, 6),
    ClassId.PEDESTRIAN: (7, 2),
    ClassId.CYCLIST: (10, 6),
}
HEADER_OUT = 17


# ---------------------------------------------------------------- weights

def parameter_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def layer(name, cin, cout, k=3, norm=True):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)
        if norm:
            shapes[f"{name}.gain"] = (cout,)
            shapes[f"{name}.bias"] = (cout,)

    cin = arch.grid.z_bins
    for s, (n, c) in enumerate(zip(arch.lidar_layers, arch.lidar_channels)):
        for l in range(n):
            layer(f"lidar.{s}.{l}", cin, c)
            cin = c
        layer(f"memory.{s}.0", 2 * c, 2 * c)
        layer(f"memory.{s}.1", 2 * c, c)
    cin = arch.map_inputs
    for s, (n, c) in enumerate(zip(arch.map_layers, arch.map_channels)):
        for l in range(n):
            layer(f"map.{s}.{l}", cin, c)
            cin = c
    cin = sum(arch.lidar_channels) + sum(arch.map_channels)
    for l in range(arch.fusion_layers):
        layer(f"fusion.{l}", cin, arch.fusion_channels)
        cin = arch.fusion_channels
    layer("header.0", cin, arch.header_channels, norm=False)
    layer("header.1", arch.header_channels, HEADER_OUT, k=1, norm=False)
    return shapes


def init_weights(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> dict[str, T.Tensor]:
    """He-uniform kernels, zero biases, unit GroupNorm gains; score logits start at logit(0.01)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr
    prior = math.log(0.01 / 0.99)
    for off, _ in HEADER_LAYOUT.values():
        params["header.1.b"][off] = prior
    return {k: T.Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()}


def check_weights(params: dict, arch: ArchConfig):
    expected = parameter_shapes(arch)
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"missing tensor {name!r}")
        got = tuple(params[name].shape)
        if got != shape:
            raise ValueError(f"tensor {name!r} has shape {got}, expected {shape}")
        if not np.all(np.isfinite(params[name].data)):
            raise ValueError(f"tensor {name!r} has non-finite values")
    extra = set(params) - set(expected)
    if extra:
        raise ValueError(f"unexpected tensor {sorted(extra)[0]!r}")


def cast_weights(params: dict, dtype) -> dict[str, T.Tensor]:
    return {k: T.Tensor(v.data.astype(dtype), requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------- layers

def conv_block(x: T.Tensor, params: dict, name: str, normalize: bool = True) -> T.Tensor:
    """Convolution, ReLU, GroupNorm."""
    h = T.relu(T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"]))
    if not normalize:
        return h
    return T.group_norm(h, groups_for(h.shape[0]), params[f"{name}.gain"], params[f"{name}.bias"])


def regional_conv_block(x_ext: T.Tensor, params: dict, prefix: str, n_layers: int,
                        inner: tuple[int, int, int, int], memory_ext: Optional[T.Tensor] = None,
                        normalize: bool = True) -> T.Tensor:
    """Run one block on a haloed crop and return the inner region.

    ``inner`` is ``(y0, y1, x0, x1)`` of the region inside the crop. When
    ``memory_ext`` is given, halo cells between layers are refilled from the
    memory so the region border sees remembered context instead of zeros.
    """
    y0, y1, x0, x1 = inner
    full = (y0, x0) == (0, 0) and (y1, x1) == tuple(x_ext.shape[1:])
    h = x_ext
    for l in range(n_layers):
        h = conv_block(h, params, f"{prefix}.{l}", normalize)
        if memory_ext is not None and not full and l < n_layers - 1:
            h = T.paste(memory_ext, T.crop(h, y0, y1, x0, x1), y0, x0)
    return h if full else T.crop(h, y0, y1, x0, x1)


def memory_update(m: T.Tensor, y: T.Tensor, params: dict, s: int) -> T.Tensor:
    """New memory content for a region from the old content ``m`` and fresh features ``y``."""
    h = T.concat_channels(m, y)
    h = conv_block(h, params, f"memory.{s}.0")
    return conv_block(h, params, f"memory.{s}.1")


# ---------------------------------------------------------------- memory

@dataclass
class SpatialMemory:
    """Per-scale feature grids (the pre-pooling block states) sharing one ego frame."""

    grids: list
    frame_pose: Optional[Pose2]
    origin: tuple[float, float]
    base_resolution: float

    @classmethod
    def zeros(cls, arch: ArchConfig, dtype=np.float32) -> "SpatialMemory":
        g = arch.grid
        grids = [
            T.Tensor(np.zeros((c, g.height >> s, g.width >> s), dtype=dtype))
            for s, c in enumerate(arch.lidar_channels)
        ]
        return cls(grids, None, g.origin, g.resolution)

    def resolution(self, s: int) -> float:
        return self.base_resolution * 2 ** s

    def realigned(self, pose: Pose2) -> "SpatialMemory":
        if self.frame_pose is None:
            return SpatialMemory(list(self.grids), pose, self.origin, self.base_resolution)
        grids = [
            realign_tensor(g, self.origin, self.resolution(s), self.frame_pose, pose)
            for s, g in enumerate(self.grids)
        ]
        return SpatialMemory(grids, pose, self.origin, self.base_resolution)

    def numpy(self) -> list[np.ndarray]:
        return [g.data for g in self.grids]


# ---------------------------------------------------------------- forward

@dataclass
class PacketOutput:
    header: Optional[T.Tensor]          # (17, h, w) over the fused region, None for empty packets
    region: Optional[RegionRect]        # full-resolution region
    fused_region: Optional[RegionRect]  # region at the fused 0.8 m scale
    pose: Pose2
    memory: SpatialMemory
    features: list = field(default_factory=list)


def packet_region(cols, rows, arch: ArchConfig) -> Optional[RegionRect]:
    g = arch.grid
    return compute_region(cols, rows, arch.region_halo, arch.stride, g.width, g.height)


def forward_region(raster: np.ndarray, map_raster: Optional[np.ndarray], region: RegionRect,
                   memory: Optional[SpatialMemory], params: dict, arch: ArchConfig,
                   normalize: bool = True):
    """Backbones, memory update, fusion and header over one region.

    ``memory`` must already be aligned to the raster frame; ``None`` disables
    the memory (no halo, no read, no write). Returns (header, new memory
    grids or None, per-scale block outputs).
    """
    dtype = params["header.0.w"].dtype
    raster_t = T.Tensor(raster.astype(dtype, copy=False))
    grids = list(memory.grids) if memory is not None else None
    outs = []
    prev = None
    for s in range(N_SCALES):
        reg = region.scaled(s)
        hs, ws = raster.shape[1] >> s, raster.shape[2] >> s
        ext = reg.expanded(arch.halo_at(s), ws, hs) if grids is not None else reg
        if s == 0:
            x = T.crop(raster_t, ext.y0, ext.y1, ext.x0, ext.x1)
        elif grids is not None:
            x = T.max_pool2(T.crop(grids[s - 1], 2 * ext.y0, 2 * ext.y1, 2 * ext.x0, 2 * ext.x1))
        else:
            x = T.max_pool2(prev)
        inner = (reg.y0 - ext.y0, reg.y1 - ext.y0, reg.x0 - ext.x0, reg.x1 - ext.x0)
        mem_ext = T.crop(grids[s], ext.y0, ext.y1, ext.x0, ext.x1) if grids is not None else None
        y = regional_conv_block(x, params, f"lidar.{s}", arch.lidar_layers[s], inner, mem_ext, normalize)
        if grids is not None:
            m = T.crop(grids[s], reg.y0, reg.y1, reg.x0, reg.x1)
            out = memory_update(m, y, params, s)
            grids[s] = T.paste(grids[s], out, reg.y0, reg.x0)
        else:
            out = y
        outs.append(out)
        prev = out

    map_outs = []
    if map_raster is not None:
        mx = T.Tensor(map_raster[:, region.y0:region.y1, region.x0:region.x1].astype(dtype, copy=False))
        for s in range(N_SCALES):
            if s:
                mx = T.max_pool2(mx)
            reg = region.scaled(s)
            mx = regional_conv_block(mx, params, f"map.{s}", arch.map_layers[s],
                                     (0, reg.y1 - reg.y0, 0, reg.x1 - reg.x0), None, normalize)
            map_outs.append(mx)
    else:
        for s in range(N_SCALES):
            h, w = region.scaled(s).shape
            map_outs.append(T.Tensor(np.zeros((arch.map_channels[s], h, w), dtype=dtype)))

    fh, fw = region.scaled(arch.fused_scale).shape
    fused = T.concat_channels(*[T.bilinear_resize(o, fh, fw) for o in outs + map_outs])
    h = fused
    for l in range(arch.fusion_layers):
        h = conv_block(h, params, f"fusion.{l}", normalize)
    h = T.relu(T.conv2d(h, params["header.0.w"], params["header.0.b"]))
    header = T.conv2d(h, params["header.1.w"], params["header.1.b"])
    return header, grids, outs


def dense_forward(raster: np.ndarray, map_raster: Optional[np.ndarray], params: dict,
                  arch: ArchConfig, use_memory: bool = True):
    """Whole-grid pass of the same network with zero memory and no cropping.

    Serves as the reference the regional path must reproduce when its region
    covers the full grid.
    """
    dtype = params["header.0.w"].dtype
    x = T.Tensor(raster.astype(dtype))
    outs = []
    for s in range(N_SCALES):
        if s:
            x = T.max_pool2(x)
        for l in range(arch.lidar_layers[s]):
            x = conv_block(x, params, f"lidar.{s}.{l}")
        if use_memory:
            x = memory_update(T.Tensor(np.zeros_like(x.data)), x, params, s)
        outs.append(x)
    if map_raster is not None:
        m = T.Tensor(map_raster.astype(dtype))
    else:
        m = None
    map_outs = []
    for s in range(N_SCALES):
        if m is None:
            hh, ww = raster.shape[1] >> s, raster.shape[2] >> s
            map_outs.append(T.Tensor(np.zeros((arch.map_channels[s], hh, ww), dtype=dtype)))
            continue
        if s:
            m = T.max_pool2(m)
        for l in range(arch.map_layers[s]):
            m = conv_block(m, params, f"map.{s}.{l}")
        map_outs.append(m)
    fh, fw = raster.shape[1] >> 2, raster.shape[2] >> 2
    h = T.concat_channels(*[T.bilinear_resize(o, fh, fw) for o in outs + map_outs])
    for l in range(arch.fusion_layers):
        h = conv_block(h, params, f"fusion.{l}")
    h = T.relu(T.conv2d(h, params["header.0.w"], params["header.0.b"]))
    return T.conv2d(h, params["header.1.w"], params["header.1.b"])


def run_packet(memory: Optional[SpatialMemory], packet: Packet, hd_map, params: dict, arch: ArchConfig,
               no_memory: bool = False, no_map: bool = False) -> PacketOutput:
    """Realign memory, voxelize, and run the regional network on one packet."""
    pose = packet.ego_pose
    if no_memory:
        mem = None
    else:
        if memory is None:
            memory = SpatialMemory.zeros(arch, params["header.0.w"].dtype)
        mem = memory.realigned(pose)
    g = arch.grid
    cols, rows, zb = points_to_cells(packet.points, pose, g)
    region = packet_region(cols, rows, arch)
    if region is None:
        return PacketOutput(None, None, None, pose, mem if mem is not None else memory)
    raster = np.zeros((g.z_bins, g.height, g.width), dtype=np.float32)
    raster[zb, rows, cols] = 1.0
    map_raster = None
    if not no_map and hd_map is not None:
        map_raster = rasterize_map(hd_map, pose, g).data
    header, grids, outs = forward_region(raster, map_raster, region, mem, params, arch)
    if mem is not None:
        mem = SpatialMemory(grids, pose, mem.origin, mem.base_resolution)
    return PacketOutput(header, region, region.scaled(arch.fused_scale), pose,
                        mem if mem is not None else memory, outs)


# ---------------------------------------------------------------- decoding

def anchor_centers(fused_region: RegionRect, arch: ArchConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame centres of the fused cells inside ``fused_region``, each (h, w)."""
    res = arch.grid.resolution * 2 ** arch.fused_scale
    ox, oy = arch.grid.origin
    xs = ox + (np.arange(fused_region.x0, fused_region.x1) + 0.5) * res
    ys = oy + (np.arange(fused_region.y0, fused_region.y1) + 0.5) * res
    return np.meshgrid(xs, ys)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def decode_boxes(header: np.ndarray, ax: np.ndarray, ay: np.ndarray, threshold: float = 0.1,
                 emitted_at: int = 0, pose: Pose2 = Pose2(), max_candidates: Optional[int] = None) -> list[DetBox]:
    """Turn header maps into boxes; ``pose`` lifts ego-frame boxes into the world frame."""
    out = []
    for cls, (off, nreg) in HEADER_LAYOUT.items():
        score = sigmoid(header[off])
        idx = np.flatnonzero(score.ravel() >= threshold)
        if max_candidates is not None and len(idx) > max_candidates:
            idx = idx[np.argsort(-score.ravel()[idx], kind="stable")[:max_candidates]]
        reg = header[off + 1: off + 1 + nreg].reshape(nreg, -1)[:, idx].astype(np.float64)
        cx = ax.ravel()[idx] + reg[0]
        cy = ay.ravel()[idx] + reg[1]
        for k in range(len(idx)):
            wx, wy = pose.apply(cx[k], cy[k])
            sc = float(score.ravel()[idx[k]])
            if cls == ClassId.PEDESTRIAN:
                out.append(DetBox(cls, wx, wy, score=sc, emitted_at=emitted_at))
            else:
                heading = math.atan2(reg[4, k], reg[5, k])
                out.append(DetBox(cls, wx, wy, float(np.exp(reg[2, k])), float(np.exp(reg[3, k])),
                                  pose_compose(pose, Pose2(0, 0, heading)).yaw, sc, emitted_at))
    return out


def encode_heading(phi: float) -> tuple[float, float]:
    return math.sin(phi), math.cos(phi)


def decode_heading(t1: float, t2: float) -> float:
    return math.atan2(t1, t2)


def nms(dets: list[DetBox], iou_threshold: float = 0.3, ped_distance: float = 0.5) -> list[DetBox]:
    """Greedy per-class suppression in descending score order."""
    from .geometry import rotated_iou
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[DetBox] = []
    for i in order:
        d = dets[i]
        suppressed = False
        for k in kept:
            if k.cls != d.cls:
                continue
            if d.cls == ClassId.PEDESTRIAN:
                if math.hypot(d.cx - k.cx, d.cy - k.cy) < ped_distance:
                    suppressed = True
                    break
            elif rotated_iou(d.as_tuple(), k.as_tuple()) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept


def detections_from(out: PacketOutput, arch: ArchConfig, emitted_at: int,
                    threshold: Optional[float] = None) -> list[DetBox]:
    if out.header is None:
        return []
    ax, ay = anchor_centers(out.fused_region, arch)
    thr = arch.score_threshold if threshold is None else threshold
    dets = decode_boxes(out.header.data, ax, ay, thr, emitted_at, out.pose, arch.max_candidates)
    return nms(dets)


def process_packet(memory: Optional[SpatialMemory], packet: Packet, hd_map, params: dict,
                   arch: ArchConfig, no_memory: bool = False, no_map: bool = False):
    """Detections emitted at ``packet.t_end`` and the updated memory."""
    with T.no_tape():
        out = run_packet(memory, packet, hd_map, params, arch, no_memory, no_map)
    return detections_from(out, arch, packet.t_end), out.memory


def merge_packets(packets: list[Packet]) -> Packet:
    """A pseudo-packet holding a whole sweep, framed at the last packet's ego pose."""
    last = packets[-1]
    return Packet(
        index=last.index,
        t_start=packets[0].t_start,
        t_end=last.t_end,
        ego_pose=last.ego_pose,
        points=np.concatenate([p.points for p in packets]),
        times=np.concatenate([p.times for p in packets]),
        azimuth_start=packets[0].azimuth_start,
        azimuth_end=last.azimuth_end,
    )


def process_sweep(packets: list[Packet], hd_map, params: dict, arch: ArchConfig,
                  use_memory: bool = True, no_map: bool = False) -> list[DetBox]:
    """Full-sweep baseline: one pass over the merged sweep with fresh memory."""
    merged = merge_packets(packets)
    mem = SpatialMemory.zeros(arch, params["header.0.w"].dtype) if use_memory else None
    dets, _ = process_packet(mem, merged, hd_map, params, arch, no_memory=not use_memory, no_map=no_map)
    return dets

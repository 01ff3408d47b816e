"""Binary packet and weight files, JSON sidecars, detection streams and run configs.

All binary formats are little-endian and framed so that truncation or a bad
magic is reported as :class:`FormatError` instead of surfacing as a numpy or
struct exception.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import jsonschema
import numpy as np

from . import tensor as T
from .evaluate import Batch, PacketObs, Run
from .geometry import ClassId, DetBox, LabelTrack, Pose2, TrackState
from .sim import ConfigError, MapSpec, Packet, ScenarioConfig, SensorSpec

PACKET_MAGIC = b"STRBP"
WEIGHT_MAGIC = b"STRBW"
VERSION = 1

POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("t", "<u4")])
_RECORD_HEAD = struct.Struct("<IqqdddddI")  # index, t_start, t_end, pose, azimuth span, n_points


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _magic(r: _Reader, magic: bytes):
    got = r.take(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("H")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


# ---------------------------------------------------------------- packets

@dataclass(frozen=True)
class PacketFile:
    sensor: SensorSpec
    seed: int
    packets: list


def encode_packet(p: Packet) -> bytes:
    n = len(p.points)
    offs = np.asarray(p.times, dtype=np.int64) - p.t_start
    if n and (offs.min() < 0 or offs.max() > 0xFFFFFFFF):
        raise ValueError("point time offsets do not fit in u32")
    pts = np.empty(n, dtype=POINT_DTYPE)
    xyz = np.asarray(p.points, dtype=np.float32).reshape(n, 3)
    pts["x"], pts["y"], pts["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    pts["t"] = offs
    head = _RECORD_HEAD.pack(p.index, p.t_start, p.t_end, p.ego_pose.x, p.ego_pose.y, p.ego_pose.yaw,
                             p.azimuth_start, p.azimuth_end, n)
    return _blob(head + pts.tobytes())


def decode_packet(rec: bytes) -> Packet:
    if len(rec) < _RECORD_HEAD.size:
        raise FormatError("packet record shorter than its header")
    idx, t0, t1, x, y, yaw, a0, a1, n = _RECORD_HEAD.unpack_from(rec)
    body = rec[_RECORD_HEAD.size:]
    if len(body) != n * POINT_DTYPE.itemsize:
        raise FormatError(f"packet {idx}: {n} points declared but {len(body)} payload bytes")
    pts = np.frombuffer(body, dtype=POINT_DTYPE)
    xyz = np.stack([pts["x"], pts["y"], pts["z"]], axis=1).astype(np.float32)
    times = pts["t"].astype(np.int64) + t0
    # Pose2 wraps its yaw; the stored value is already wrapped so this is exact
    return Packet(idx, t0, t1, Pose2(x, y, yaw), xyz, times, a0, a1)


def write_packets(path, sensor: SensorSpec, seed: int, packets: Iterable[Packet]):
    packets = list(packets)
    spec = json.dumps(asdict(sensor), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(PACKET_MAGIC + struct.pack("<H", VERSION))
        f.write(_blob(spec))
        f.write(struct.pack("<qI", seed, len(packets)))
        for p in packets:
            f.write(encode_packet(p))


def read_packets(path) -> PacketFile:
    r = _Reader(Path(path).read_bytes())
    _magic(r, PACKET_MAGIC)
    (n,) = r.unpack("I")
    try:
        spec = json.loads(r.take(n).decode())
        sensor = SensorSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad sensor spec: {exc}") from None
    seed, count = r.unpack("qI")
    packets = []
    for _ in range(count):
        (size,) = r.unpack("I")
        packets.append(decode_packet(r.take(size)))
    if not r.done():
        raise FormatError("trailing bytes after last packet record")
    return PacketFile(sensor, seed, packets)


# ---------------------------------------------------------------- label sidecar

def _track_dict(tr: LabelTrack) -> dict:
    return {
        "actor_id": tr.actor_id, "cls": tr.cls.label, "length": tr.length, "width": tr.width,
        "states": [[s.t, s.pose.x, s.pose.y, s.pose.yaw, s.velocity[0], s.velocity[1], s.yaw_rate]
                   for s in tr.states],
    }


def _track_from(d: dict) -> LabelTrack:
    states = tuple(TrackState(int(t), Pose2(x, y, yaw), (vx, vy), wr) for t, x, y, yaw, vx, vy, wr in d["states"])
    return LabelTrack(int(d["actor_id"]), ClassId.parse(d["cls"]), d["length"], d["width"], states)


@dataclass
class LabelSidecar:
    scenario: ScenarioConfig
    tracks: list
    observations: list  # list[PacketObs]

    @property
    def map(self) -> MapSpec:
        return self.scenario.map


def write_labels(path, cfg: ScenarioConfig, tracks, obs: Iterable[PacketObs]):
    doc = {
        "scenario": cfg.to_dict(),
        "tracks": [_track_dict(t) for t in tracks],
        "observations": [
            {"index": o.index, "t_start": o.t_start, "t_end": o.t_end,
             "pose": [o.pose.x, o.pose.y, o.pose.yaw], "sector": list(o.sector),
             "observed": {str(k): v for k, v in sorted(o.observed.items())}}
            for o in obs
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_labels(path) -> LabelSidecar:
    try:
        doc = json.loads(Path(path).read_text())
        cfg = ScenarioConfig.from_dict(doc["scenario"])
        tracks = [_track_from(t) for t in doc["tracks"]]
        obs = [PacketObs(o["index"], o["t_start"], o["t_end"], Pose2(*o["pose"]), tuple(o["sector"]),
                         {int(k): v for k, v in o["observed"].items()})
               for o in doc["observations"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad label sidecar {path}: {exc}") from None
    return LabelSidecar(cfg, tracks, obs)


# ---------------------------------------------------------------- weights

def write_weights(path, params: dict):
    """Entries in sorted name order so identical weights give identical bytes."""
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC + struct.pack("<HI", VERSION, len(params)))
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], T.Tensor) else np.asarray(params[name])
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_weights(path, arch=None) -> dict:
    """Load named tensors; with ``arch`` the names and shapes are checked against its schedule."""
    r = _Reader(Path(path).read_bytes())
    _magic(r, WEIGHT_MAGIC)
    (count,) = r.unpack("I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("H")
        try:
            name = r.take(n).decode()
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8") from None
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        arr = np.frombuffer(r.take(size), dtype="<f4").reshape(dims).astype(np.float32)
        out[name] = T.Tensor(arr, requires_grad=True)
    if not r.done():
        raise FormatError("trailing bytes after last tensor")
    if arch is not None:
        from .net import check_weights
        check_weights(out, arch)
    return out


# ---------------------------------------------------------------- detections

def det_to_dict(d: DetBox) -> dict:
    return {"class": d.cls.label, "cx": d.cx, "cy": d.cy, "l": d.length, "w": d.width,
            "heading": d.heading, "score": d.score, "emitted_at_us": d.emitted_at}


def det_from_dict(d: dict) -> DetBox:
    return DetBox(ClassId.parse(d["class"]), d["cx"], d["cy"], d.get("l"), d.get("w"), d.get("heading"),
                  d["score"], int(d["emitted_at_us"]))


def write_detections(path, run: Run):
    """JSON-lines: a header line, then one line per batch holding its detections."""
    lines = [json.dumps({"scenario": run.scenario, "mode": run.mode}, sort_keys=True)]
    for b in run.batches:
        lines.append(json.dumps({"frame": b.frame, "t_start_us": b.t_start, "emitted_at_us": b.emitted_at,
                                 "detections": [det_to_dict(d) for d in b.detections]}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_detections(path) -> Run:
    try:
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        run = Run(head["scenario"], head["mode"])
        for line in lines[1:]:
            b = json.loads(line)
            run.batches.append(Batch(b["frame"], b["t_start_us"], b["emitted_at_us"],
                                     [det_from_dict(d) for d in b["detections"]]))
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad detection file {path}: {exc}") from None
    return run


def write_timings(path, run: Run):
    with open(path, "w") as f:
        f.write("frame,emitted_at_us,inference_ms\n")
        for b in run.batches:
            f.write(f"{b.frame},{b.emitted_at},{b.inference_ms!r}\n")


def read_timings(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines()[1:]:
        frame, _, ms = line.split(",")
        out[int(frame)] = float(ms)
    return out


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- run config

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scenario": {"oneOf": [{"type": "string"}, {"type": "object"}]},
        "scenario_args": {"type": "object"},
        "mode": {"enum": ["packet", "sweep"]},
        "no_memory": {"type": "boolean"},
        "no_map": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "arch": {"oneOf": [{"enum": ["toy", "full"]}, {"type": "object"}]},
        "weights": {"type": "string"},
        "packets": {"type": "string"},
        "labels": {"type": "string"},
        "detections": {"type": "string"},
        "timings": {"type": "string"},
        "report": {"type": "string"},
        "checkpoint": {"type": "string"},
        "checkpoint_every": {"type": "integer", "minimum": 1},
        "loss_trace": {"type": "string"},
        "resume": {"type": "boolean"},
        "train": {"type": "object"},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "vehicle_iou": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "cyclist_iou": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "pedestrian_dist": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "range_cap": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "bench_packets": {"type": "integer", "minimum": 10},
    },
    "required": ["scenario"],
}

RUN_DEFAULTS = {"mode": "packet", "no_memory": False, "no_map": False, "seed": 0, "arch": "toy"}


def load_run_config(path=None, doc: Optional[dict] = None) -> dict:
    """Parse and schema-check a run config; raises :class:`ConfigError` with the diagnostics."""
    if doc is None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    out = dict(RUN_DEFAULTS)
    out.update(doc)
    if path is not None:
        base = Path(path).resolve().parent
        for key in ("weights", "packets", "labels", "detections", "timings", "report", "checkpoint", "loss_trace"):
            if key in out and not Path(out[key]).is_absolute():
                out[key] = str(base / out[key])
    return out

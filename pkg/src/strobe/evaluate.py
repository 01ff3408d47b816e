"""Latency-aware and common mAP, plus end-to-end latency accounting.

Detections are scored frame by frame. In latency mode a frame's labels are
the actor boxes at the frame's emission time; in common mode they are the
boxes at the time the actor's returns were acquired. Only actors that have
produced at least one return so far are scored.

Packet-mode frames hold the actors with returns in that packet plus any
previously seen actor whose centroid lies inside the packet's sector;
unmatched detections outside the sector are ignored rather than counted as
false positives. Sweep-mode frames hold every seen actor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import (
    PACKET_US,
    PEDESTRIAN_RADIUS,
    ClassId,
    DetBox,
    LabelTrack,
    Pose2,
    rotated_iou,
    track_state_at,
)
from .sim import Label


@dataclass(frozen=True)
class EvalConfig:
    vehicle_iou: tuple[float, float] = (0.5, 0.7)
    cyclist_iou: tuple[float, float] = (0.3, 0.5)
    pedestrian_dist: tuple[float, float] = (0.5, 0.3)
    range_cap: float = 72.0

    def thresholds(self, cls: ClassId) -> tuple[float, float]:
        return {
            ClassId.VEHICLE: self.vehicle_iou,
            ClassId.PEDESTRIAN: self.pedestrian_dist,
            ClassId.CYCLIST: self.cyclist_iou,
        }[cls]


@dataclass(frozen=True)
class PacketObs:
    """Ground-truth bookkeeping for one simulated packet."""

    index: int  # global packet number
    t_start: int
    t_end: int
    pose: Pose2
    sector: tuple[float, float]
    observed: dict  # actor_id -> latest return time within the packet


@dataclass
class Batch:
    """Detections emitted at one instant together with what they were computed from."""

    frame: int  # global packet number (packet mode) or sweep number (sweep mode)
    t_start: int  # start of the data accumulated for this emission
    emitted_at: int
    detections: list = field(default_factory=list)
    inference_ms: Optional[float] = None


@dataclass
class Run:
    scenario: str
    mode: str  # "packet" | "sweep"
    batches: list = field(default_factory=list)


def observations_from(frames) -> list[PacketObs]:
    return [
        PacketObs(k, f.packet.t_start, f.packet.t_end, f.packet.ego_pose,
                  (f.packet.azimuth_start, f.packet.azimuth_end), dict(f.observed))
        for k, f in enumerate(frames)
    ]


# ---------------------------------------------------------------- label frames

@dataclass
class Frame:
    emitted_at: int
    labels: list  # list[Label]
    observed_at: dict  # actor_id -> observation time
    sector: Optional[tuple[float, float]]
    origin: tuple[float, float]
    returns: frozenset = frozenset()  # actors with returns in this frame's data


def _in_sector(x, y, origin, sector) -> bool:
    a0, a1 = sector
    ang = math.atan2(y - origin[1], x - origin[0])
    return (ang - a0) % (2 * math.pi) < (a1 - a0)


def build_label_frame(tracks: Sequence[LabelTrack], t_emit: int, mode: str,
                      observed_at: Optional[dict] = None, ids: Optional[Iterable[int]] = None) -> list[Label]:
    """Boxes of the requested actors, at ``t_emit`` or at each actor's observation time.

    Actors whose track has ended before ``t_emit`` are excluded in both modes.
    """
    if mode not in ("emission", "observation"):
        raise ValueError(f"unknown label mode {mode!r}")
    wanted = None if ids is None else set(ids)
    out = []
    for tr in tracks:
        if wanted is not None and tr.actor_id not in wanted:
            continue
        if not tr.alive(t_emit):
            continue
        t = t_emit if mode == "emission" else observed_at[tr.actor_id]
        pose, (l, w) = track_state_at(tr, t)
        out.append(Label(tr.actor_id, tr.cls, pose, l, w))
    return out


def packet_frames(obs: Sequence[PacketObs], tracks, cfg: EvalConfig) -> list[dict]:
    """Frame definitions (actor ids + observation times) for packet-mode scoring."""
    by_id = {tr.actor_id: tr for tr in tracks}
    last_seen: dict = {}
    frames = []
    for o in obs:
        last_seen.update(o.observed)
        origin = (o.pose.x, o.pose.y)
        ids = []
        for aid in sorted(last_seen):
            tr = by_id[aid]
            if not tr.alive(o.t_end):
                continue
            if aid not in o.observed:
                pose, _ = track_state_at(tr, o.t_end)
                if not _in_sector(pose.x, pose.y, origin, o.sector):
                    continue
            ids.append(aid)
        frames.append(dict(t_emit=o.t_end, ids=ids, observed_at={a: last_seen[a] for a in ids},
                           sector=o.sector, origin=origin, returns=frozenset(o.observed)))
    return frames


def sweep_frames(obs: Sequence[PacketObs], tracks, per_sweep: int = 10) -> list[dict]:
    by_id = {tr.actor_id: tr for tr in tracks}
    last_seen: dict = {}
    frames = []
    for s in range(len(obs) // per_sweep):
        chunk = obs[s * per_sweep:(s + 1) * per_sweep]
        returns = set()
        for o in chunk:
            last_seen.update(o.observed)
            returns.update(o.observed)
        t_emit = chunk[-1].t_end
        ids = [a for a in sorted(last_seen) if by_id[a].alive(t_emit)]
        frames.append(dict(t_emit=t_emit, ids=ids, observed_at={a: last_seen[a] for a in ids},
                           sector=None, origin=(chunk[-1].pose.x, chunk[-1].pose.y),
                           returns=frozenset(returns)))
    return frames


def materialize(frame_defs, tracks, mode: str, cfg: EvalConfig) -> list[Frame]:
    out = []
    for fd in frame_defs:
        labels = build_label_frame(tracks, fd["t_emit"], mode, fd["observed_at"], fd["ids"])
        ox, oy = fd["origin"]
        labels = [lab for lab in labels if math.hypot(lab.pose.x - ox, lab.pose.y - oy) <= cfg.range_cap]
        out.append(Frame(fd["t_emit"], labels, fd["observed_at"], fd["sector"], fd["origin"], fd["returns"]))
    return out


# ---------------------------------------------------------------- matching

def _passes(det: DetBox, lab: Label, cls: ClassId, thr: float):
    """Match quality (higher is better) if the pair passes ``thr``, else None."""
    if cls == ClassId.PEDESTRIAN:
        d = math.hypot(det.cx - lab.pose.x, det.cy - lab.pose.y)
        return -d if d <= thr else None
    iou = rotated_iou(det.as_tuple(), lab.box)
    return iou if iou >= thr else None


def match_and_score(dets: Sequence[DetBox], labels: Sequence[Label], thr: float, cls: ClassId,
                    ignore=None):
    """Greedy matching in descending score.

    Returns (scores, tp flags, matched label ids). Unmatched detections for
    which ``ignore(det)`` is true are dropped from the output.
    """
    dets = sorted((d for d in dets if d.cls == cls), key=lambda d: -d.score)
    labs = [lab for lab in labels if lab.cls == cls]
    used = [False] * len(labs)
    scores, flags, matched = [], [], []
    for d in dets:
        best, best_q = -1, None
        for j, lab in enumerate(labs):
            if used[j]:
                continue
            q = _passes(d, lab, cls, thr)
            if q is not None and (best_q is None or q > best_q):
                best, best_q = j, q
        if best >= 0:
            used[best] = True
            scores.append(d.score)
            flags.append(True)
            matched.append(labs[best].actor_id)
        elif ignore is None or not ignore(d):
            scores.append(d.score)
            flags.append(False)
    return scores, flags, matched


def average_precision(scores: Sequence[float], flags: Sequence[bool], n_labels: int) -> float:
    """All-point AP: area under the monotone precision envelope.

    The curve is evaluated at every distinct score threshold, so tied scores
    enter together. Computed in exact rationals and rounded once.
    """
    if n_labels == 0:
        return float("nan")
    if not len(scores):
        return 0.0
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(flags, dtype=bool)
    order = np.argsort(-s, kind="stable")
    s, f = s[order], f[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(f)[ends]
    n = ends + 1
    prec = [Fraction(int(a), int(b)) for a, b in zip(tp, n)]
    env = prec[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = Fraction(0)
    prev_tp = 0
    for i, t in enumerate(tp):
        if t > prev_tp:
            ap += Fraction(int(t - prev_tp), n_labels) * env[i]
            prev_tp = int(t)
    return float(ap)


# ---------------------------------------------------------------- reports

CLASS_ORDER = (ClassId.VEHICLE, ClassId.PEDESTRIAN, ClassId.CYCLIST)


def _thr_key(cls: ClassId, thr: float) -> str:
    return f"{thr:.1f}m" if cls == ClassId.PEDESTRIAN else f"{thr:.1f}"


def score_frames(batches: Sequence[Batch], frames: Sequence[Frame], cfg: EvalConfig,
                 subset=None) -> dict:
    """AP table {class: {threshold: AP}} for detections paired with label frames.

    ``subset(frame, label)`` optionally restricts which labels count; detections
    matched to excluded labels are ignored.
    """
    table = {}
    for cls in CLASS_ORDER:
        row = {}
        for thr in cfg.thresholds(cls):
            all_s, all_f, n_lab = [], [], 0
            for b, fr in zip(batches, frames):
                labels = [lab for lab in fr.labels if lab.cls == cls]
                ignore = None
                if fr.sector is not None:
                    ignore = _outside(fr)
                s, f, m = match_and_score(b.detections, labels, thr, cls, ignore)
                if subset is not None:
                    keep_ids = {lab.actor_id for lab in labels if subset(fr, lab)}
                    n_lab += len(keep_ids)
                    mi = iter(m)
                    for sc, fl in zip(s, f):
                        if fl:
                            if next(mi) not in keep_ids:
                                continue
                        all_s.append(sc)
                        all_f.append(fl)
                else:
                    n_lab += len(labels)
                    all_s += s
                    all_f += f
            row[_thr_key(cls, thr)] = average_precision(all_s, all_f, n_lab)
        table[cls.label] = row
    return table


def _outside(fr: Frame):
    def ignore(d: DetBox) -> bool:
        return not _in_sector(d.cx, d.cy, fr.origin, fr.sector)
    return ignore


def frames_for(run: Run, obs, tracks, mode: str, cfg: EvalConfig) -> list[Frame]:
    if run.mode == "packet":
        defs = packet_frames(obs, tracks, cfg)
        defs = [defs[b.frame] for b in run.batches]
    elif run.mode == "sweep":
        defs = sweep_frames(obs, tracks)
        defs = [defs[b.frame] for b in run.batches]
    else:
        raise ValueError(f"unknown run mode {run.mode!r}")
    return materialize(defs, tracks, mode, cfg)


def latency_breakdown(run: Run) -> dict:
    """Accumulation from the simulated clock, inference from recorded wall clock."""
    acc = sorted({(b.emitted_at - b.t_start) / 1000.0 for b in run.batches})
    times = [b.inference_ms for b in run.batches if b.inference_ms is not None]
    out = {"accumulation_ms": acc[-1] if acc else None}
    if times:
        p50, p95 = np.percentile(times, [50, 95])
        out.update(inference_p50_ms=float(p50), inference_p95_ms=float(p95),
                   total_p50_ms=out["accumulation_ms"] + float(p50))
    return out


def mean_ap(table: dict) -> float:
    vals = [v for row in table.values() for v in row.values() if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(run: Run, tracks, obs, cfg: EvalConfig = EvalConfig(), scenario: Optional[str] = None,
             timings: bool = True) -> dict:
    """Both label modes for one run; a JSON-ready dict."""
    if scenario is not None and scenario != run.scenario:
        raise ValueError(f"detections are from {run.scenario!r}, labels from {scenario!r}")
    report = {
        "scenario": run.scenario,
        "mode": run.mode,
        "conventions": {
            "pedestrian_radius_m": PEDESTRIAN_RADIUS,
            "range_cap_m": cfg.range_cap,
            "ap": "all-point precision envelope",
        },
    }
    for name, mode in (("latency", "emission"), ("common", "observation")):
        frames = frames_for(run, obs, tracks, mode, cfg)
        table = score_frames(run.batches, frames, cfg)
        report[name] = {"ap": table, "mAP": mean_ap(table)}
    bd = latency_breakdown(run)
    if not timings:
        bd = {"accumulation_ms": bd["accumulation_ms"]}
    report["latency_breakdown"] = bd
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=True) + "\n"


def report_text(report: dict) -> str:
    """Plain table in the layout: vehicle 0.5/0.7, pedestrian .5m/.3m, cyclist 0.3/0.5."""
    lines = [f"scenario {report['scenario']}  mode {report['mode']}"]
    head = "".join(f"{cls.label}@{k:>5} " for cls in CLASS_ORDER
                   for k in report["latency"]["ap"][cls.label])
    lines.append(f"{'':12s}{head}")
    for name, title in (("latency", "Latency mAP"), ("common", "Common mAP")):
        row = "".join(f"{100 * v:>{len(cls.label) + 7}.1f} " if not math.isnan(v) else f"{'-':>{len(cls.label) + 7}} "
                      for cls in CLASS_ORDER for v in report[name]["ap"][cls.label].values())
        lines.append(f"{title:12s}{row}")
    bd = report["latency_breakdown"]
    lines.append(f"accumulation {bd['accumulation_ms']} ms")
    if "inference_p50_ms" in bd:
        lines.append(f"inference p50 {bd['inference_p50_ms']:.2f} ms  p95 {bd['inference_p95_ms']:.2f} ms"
                     f"  total p50 {bd['total_p50_ms']:.2f} ms")
    lines.append(f"pedestrian disc radius {report['conventions']['pedestrian_radius_m']} m (convention)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- oracle detector

def oracle_run(scenario: str, obs: Sequence[PacketObs], tracks, mode: str, cfg: EvalConfig = EvalConfig()) -> Run:
    """Perfect boxes at each actor's observation pose, emitted at packet or sweep end."""
    defs = packet_frames(obs, tracks, cfg) if mode == "packet" else sweep_frames(obs, tracks)
    frames = materialize(defs, tracks, "observation", cfg)
    run = Run(scenario, mode)
    for k, (fd, fr) in enumerate(zip(defs, frames)):
        t_start = obs[k].t_start if mode == "packet" else obs[k * 10].t_start
        dets = [
            DetBox(lab.cls, lab.pose.x, lab.pose.y, score=1.0, emitted_at=fr.emitted_at)
            if lab.cls == ClassId.PEDESTRIAN else
            DetBox(lab.cls, lab.pose.x, lab.pose.y, lab.length, lab.width, lab.pose.yaw, 1.0, fr.emitted_at)
            for lab in fr.labels
        ]
        run.batches.append(Batch(k, t_start, fr.emitted_at, dets))
    return run

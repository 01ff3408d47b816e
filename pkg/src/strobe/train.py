"""Target assignment, detection losses and truncated-BPTT training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .bev import RegionRect
from .geometry import ClassId, Pose2, relative_pose
from .net import (
    HEADER_LAYOUT,
    ArchConfig,
    SpatialMemory,
    run_packet,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 2.0
    gamma: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 2.0, 2.0)
    beta: float = 1.0
    negatives: tuple[int, int, int] = (750, 1500, 1500)  # vehicle, pedestrian, cyclist
    hard_k: int = 20
    seq_len: int = 50
    warmup: int = 40
    window: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: Optional[float] = 10.0
    steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.warmup + self.window != self.seq_len:
            raise ValueError("warmup + window must equal seq_len")
        if min(self.negatives) <= 0 or self.hard_k <= 0 or self.window <= 0 or self.steps < 0:
            raise ValueError("counts must be positive")


@dataclass
class TargetMap:
    """Per-class positives and regression targets over the fused region."""

    shape: tuple[int, int]
    pos: dict = field(default_factory=dict)
    reg: dict = field(default_factory=dict)
    skipped: int = 0

    def negatives(self, cls: ClassId) -> np.ndarray:
        return ~self.pos[cls]

    @property
    def n_pos(self) -> int:
        return int(sum(p.sum() for p in self.pos.values()))


def assign_targets(labels, pose: Pose2, fused_region: RegionRect, arch: ArchConfig) -> TargetMap:
    """Mark the fused cell holding each label centroid as that class's positive.

    Regression targets: offset to the cell centre, log length, log width,
    then (sin, cos) of the ego-relative heading. Labels falling off the grid
    are counted in ``skipped``; labels on the grid but outside the region are
    simply not supervised.
    """
    h, w = fused_region.shape
    tm = TargetMap((h, w))
    for cls, (_, nreg) in HEADER_LAYOUT.items():
        tm.pos[cls] = np.zeros((h, w), dtype=bool)
        tm.reg[cls] = np.zeros((nreg, h, w), dtype=np.float64)
    res = arch.grid.resolution * 2 ** arch.fused_scale
    ox, oy = arch.grid.origin
    gw, gh = arch.grid.width >> arch.fused_scale, arch.grid.height >> arch.fused_scale
    for lab in labels:
        local = relative_pose(pose, lab.pose)
        col = math.floor((local.x - ox) / res)
        row = math.floor((local.y - oy) / res)
        if not (0 <= col < gw and 0 <= row < gh):
            tm.skipped += 1
            continue
        if not fused_region.contains(col, row):
            continue
        r, c = row - fused_region.y0, col - fused_region.x0
        if tm.pos[lab.cls][r, c]:
            continue
        tm.pos[lab.cls][r, c] = True
        dx = local.x - (ox + (col + 0.5) * res)
        dy = local.y - (oy + (row + 0.5) * res)
        if lab.cls == ClassId.PEDESTRIAN:
            tm.reg[lab.cls][:, r, c] = (dx, dy)
        else:
            tm.reg[lab.cls][:, r, c] = (dx, dy, math.log(lab.length), math.log(lab.width),
                                        math.sin(local.yaw), math.cos(local.yaw))
    return tm


# ---------------------------------------------------------------- losses

def smooth_l1(d: np.ndarray, beta: float = 1.0):
    """Smooth L1 value and derivative."""
    a = np.abs(d)
    quad = a < beta
    val = np.where(quad, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return val, grad


def softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def regression_loss(pred: np.ndarray, tm: TargetMap, gamma=(1, 1, 1, 1, 2, 2), beta: float = 1.0):
    """Mean over positives of the gamma-weighted smooth L1; returns (value, d value / d pred)."""
    grad = np.zeros_like(pred, dtype=np.float64)
    n = tm.n_pos
    if n == 0:
        return 0.0, grad
    total = 0.0
    for cls, (off, nreg) in HEADER_LAYOUT.items():
        mask = tm.pos[cls]
        if not mask.any():
            continue
        g = np.asarray(gamma[:nreg], dtype=np.float64)[:, None]
        p = pred[off + 1: off + 1 + nreg][:, mask].astype(np.float64)
        val, dv = smooth_l1(p - tm.reg[cls][:, mask], beta)
        total += float((g * val).sum())
        sub = grad[off + 1: off + 1 + nreg]
        sub[:, mask] = g * dv / n
    return total / n, grad


def hard_negatives(losses: np.ndarray, candidates: np.ndarray, n_sample: int, k: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample ``n_sample`` candidates, keep the ``k`` with the highest loss."""
    if len(candidates) > n_sample:
        candidates = np.sort(rng.choice(candidates, n_sample, replace=False))
    order = np.argsort(-losses[candidates], kind="stable")
    return candidates[order[:k]]


def classification_loss(logits: np.ndarray, tm: TargetMap, negatives=(750, 1500, 1500), k: int = 20,
                        rng: Optional[np.random.Generator] = None):
    """Positive log-loss averaged over all positives plus per-class hard-negative log-loss.

    Works on logits: ``-log(sigma) = softplus(-z)`` and ``-log(1 - sigma) = softplus(z)``.
    Returns (value, gradient w.r.t. the full header array).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grad = np.zeros_like(logits, dtype=np.float64)
    n = tm.n_pos
    pos_term = 0.0
    neg_term = 0.0
    for ci, (cls, (off, _)) in enumerate(HEADER_LAYOUT.items()):
        z = logits[off].astype(np.float64)
        pos = tm.pos[cls]
        if n and pos.any():
            pos_term += float(softplus(-z[pos]).sum()) / n
            grad[off][pos] = (_sigmoid(z[pos]) - 1.0) / n
        flat = z.ravel()
        cand = np.flatnonzero(~pos.ravel())
        if len(cand) == 0:
            continue
        nl = softplus(flat)
        kept = hard_negatives(nl, cand, negatives[ci], k, rng)
        neg_term += float(nl[kept].sum()) / len(kept)
        g = grad[off].reshape(-1)
        g[kept] += _sigmoid(flat[kept]) / len(kept)
    return pos_term + neg_term, grad


def total_loss(l_reg, l_cls, alpha: float = 2.0):
    return l_reg + alpha * l_cls


def detection_loss(header: T.Tensor, tm: TargetMap, cfg: TrainConfig, rng: np.random.Generator):
    """Tape-aware multi-task loss; returns (loss tensor, L_reg, L_cls)."""
    data = header.data
    l_reg, g_reg = regression_loss(data, tm, cfg.gamma, cfg.beta)
    l_cls, g_cls = classification_loss(data, tm, cfg.negatives, cfg.hard_k, rng)
    value = total_loss(l_reg, l_cls, cfg.alpha)
    grad = (g_reg + cfg.alpha * g_cls).astype(data.dtype)
    return T.custom(np.asarray(value, dtype=data.dtype), [header], [grad]), l_reg, l_cls


# ---------------------------------------------------------------- optimisation

class MomentumSGD:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9, clip_norm: Optional[float] = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params.values()))
        k = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            k = self.clip_norm / norm
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += k * p.grad
            p.data -= self.lr * v
        return norm


def snippet_labels(frames) -> list:
    """Per-frame labels restricted to actors already seen within this snippet."""
    seen: set = set()
    out = []
    for f in frames:
        seen.update(f.observed)
        out.append([lab for lab in f.labels if lab.actor_id in seen])
    return out


def sequence_loss(frames, params: dict, arch: ArchConfig, cfg: TrainConfig,
                  rng: np.random.Generator, no_memory: bool = False, no_map: bool = False):
    """Warm up the memory without a tape, then record the supervised window.

    Returns (tape, loss tensor or None, summed L_reg, summed L_cls).
    """
    if len(frames) < cfg.seq_len:
        raise ValueError(f"sequence needs {cfg.seq_len} packets, got {len(frames)}")
    frames = frames[:cfg.seq_len]
    labels = snippet_labels(frames)
    memory = None
    with T.no_tape():
        for f in frames[:cfg.warmup]:
            memory = run_packet(memory, f.packet, f.map, params, arch, no_memory, no_map).memory
    tape = T.Tape()
    loss = None
    l_reg = l_cls = 0.0
    with tape:
        for f, labs in zip(frames[cfg.warmup:], labels[cfg.warmup:]):
            out = run_packet(memory, f.packet, f.map, params, arch, no_memory, no_map)
            memory = out.memory
            if out.header is None:
                continue
            tm = assign_targets(labs, out.pose, out.fused_region, arch)
            lk, r, c = detection_loss(out.header, tm, cfg, rng)
            loss = lk if loss is None else T.add(loss, lk)
            l_reg += r
            l_cls += c
    return tape, loss, l_reg, l_cls


def train_sequence(frames, params: dict, arch: ArchConfig, cfg: TrainConfig,
                   optimizer: MomentumSGD, rng: np.random.Generator, **flags):
    """One optimizer step on one 50-packet sequence; returns (L_reg, L_cls, L)."""
    optimizer.zero_grad()
    tape, loss, l_reg, l_cls = sequence_loss(frames, params, arch, cfg, rng, **flags)
    if loss is None:
        return 0.0, 0.0, 0.0
    T.backward(tape, loss)
    optimizer.step()
    return l_reg, l_cls, total_loss(l_reg, l_cls, cfg.alpha)


@dataclass
class TrainState:
    step: int = 0
    trace: list = field(default_factory=list)
    optimizer: Optional[MomentumSGD] = None


def train(frames, params: dict, arch: ArchConfig, cfg: TrainConfig, state: Optional[TrainState] = None,
          on_step=None, **flags) -> TrainState:
    """Run ``cfg.steps`` sequences drawn at random offsets from one simulated scenario.

    The offsets come from ``cfg.seed`` and the step number alone, so a resumed
    run sees the same sequence of snippets as an uninterrupted one.
    """
    if len(frames) < cfg.seq_len:
        raise ValueError(f"scenario has {len(frames)} packets, need at least {cfg.seq_len}")
    state = state or TrainState()
    if state.optimizer is None:
        state.optimizer = MomentumSGD(params, cfg.lr, cfg.momentum, cfg.clip_norm)
    opt = state.optimizer
    log.info("sequence layout: %d warm-up + %d BPTT packets", cfg.warmup, cfg.window)
    while state.step < cfg.steps:
        rng = np.random.default_rng([cfg.seed, state.step])
        start = int(rng.integers(0, len(frames) - cfg.seq_len + 1))
        l_reg, l_cls, l = train_sequence(frames[start:start + cfg.seq_len], params, arch, cfg, opt, rng, **flags)
        state.trace.append((state.step, l_reg, l_cls, l))
        log.debug("step %d start %d L_reg %.4f L_cls %.4f L %.4f", state.step, start, l_reg, l_cls, l)
        state.step += 1
        if on_step is not None:
            on_step(state)
    return state


def write_trace(trace: Sequence, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "L_reg", "L_cls", "L"])
        for row in trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

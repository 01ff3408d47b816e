"""Streaming inference over a simulated packet sequence."""

from __future__ import annotations

import time
from typing import Optional, Sequence

from .evaluate import Batch, Run
from .net import ArchConfig, process_packet, process_sweep


def infer(frames: Sequence, params: dict, arch: ArchConfig, mode: str = "packet", scenario: str = "",
          no_memory: bool = False, no_map: bool = False, per_sweep: int = 10,
          clock=time.perf_counter) -> Run:
    """Run the detector over ``frames`` (SimFrame or Packet-bearing objects).

    Packet mode emits one batch per packet at its end time, carrying memory
    forward. Sweep mode waits for ``per_sweep`` packets and emits once at the
    end of the sweep.
    """
    run = Run(scenario, mode)
    hd_map = frames[0].map if frames else None
    if mode == "packet":
        memory = None
        for k, f in enumerate(frames):
            t0 = clock()
            dets, memory = process_packet(memory, f.packet, hd_map, params, arch, no_memory, no_map)
            ms = (clock() - t0) * 1000.0
            run.batches.append(Batch(k, f.packet.t_start, f.packet.t_end, dets, ms))
    elif mode == "sweep":
        for s in range(len(frames) // per_sweep):
            chunk = [f.packet for f in frames[s * per_sweep:(s + 1) * per_sweep]]
            t0 = clock()
            dets = process_sweep(chunk, hd_map, params, arch, use_memory=not no_memory, no_map=no_map)
            ms = (clock() - t0) * 1000.0
            run.batches.append(Batch(s, chunk[0].t_start, chunk[-1].t_end, dets, ms))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return run


def restrict(run: Run, keep) -> Run:
    """Copy of ``run`` holding only batches for which ``keep(batch)`` is true."""
    return Run(run.scenario, run.mode, [b for b in run.batches if keep(b)])


def timings_ms(run: Run) -> list[float]:
    return [b.inference_ms for b in run.batches if b.inference_ms is not None]


def first_batch(run: Run) -> Optional[Batch]:
    return run.batches[0] if run.batches else None

"""Command-line entry point: ``strobe simulate|infer|train|eval|bench --config run.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import evaluate as E
from . import io as sio
from . import scenarios
from .net import ArchConfig, check_weights, init_weights
from .pipeline import infer
from .sim import ConfigError, ScenarioConfig, build_tracks, simulate
from .train import MomentumSGD, TrainConfig, TrainState, train, write_trace

log = logging.getLogger("strobe")

EXIT_VALIDATION = 2


# ---------------------------------------------------------------- config helpers

def scenario_from(cfg: dict) -> ScenarioConfig:
    spec = cfg["scenario"]
    if isinstance(spec, str):
        try:
            sc = scenarios.get(spec, **cfg.get("scenario_args", {}))
        except (KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    else:
        sc = ScenarioConfig.from_dict(spec)
    sc = replace(sc, seed=cfg["seed"])
    sc.validate()
    return sc


def arch_from(cfg: dict) -> ArchConfig:
    a = cfg["arch"]
    if a == "toy":
        return ArchConfig.toy()
    if a == "full":
        return ArchConfig()
    try:
        return ArchConfig.from_dict(a)
    except TypeError as exc:
        raise ConfigError(f"arch: {exc}") from None


def train_config_from(cfg: dict) -> TrainConfig:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.get("train", {}).items()}
    d.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def eval_config_from(cfg: dict) -> E.EvalConfig:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.get("eval", {}).items()}
    return E.EvalConfig(**d)


def need(cfg: dict, key: str) -> str:
    if key not in cfg:
        raise ConfigError(f"config needs {key!r} for this command")
    return cfg[key]


class _Frame:
    """What the inference pipeline needs from a packet read back from disk."""

    __slots__ = ("packet", "map")

    def __init__(self, packet, hd_map):
        self.packet = packet
        self.map = hd_map


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: dict) -> int:
    sc = scenario_from(cfg)
    frames = simulate(sc)
    tracks = build_tracks(sc)
    sio.write_packets(need(cfg, "packets"), sc.sensor, sc.seed, [f.packet for f in frames])
    sio.write_labels(need(cfg, "labels"), sc, tracks, E.observations_from(frames))
    n_pts = sum(len(f.packet) for f in frames)
    print(f"{sc.name}: {len(frames)} packets, {len(sc.actors)} actors, {n_pts} points, seed {sc.seed}")
    return 0


def cmd_infer(cfg: dict) -> int:
    arch = arch_from(cfg)
    pf = sio.read_packets(need(cfg, "packets"))
    side = sio.read_labels(need(cfg, "labels"))
    params = sio.read_weights(need(cfg, "weights"), arch)
    frames = [_Frame(p, side.map) for p in pf.packets]
    run = infer(frames, params, arch, cfg["mode"], side.scenario.name, cfg["no_memory"], cfg["no_map"])
    sio.write_detections(need(cfg, "detections"), run)
    if "timings" in cfg:
        sio.write_timings(cfg["timings"], run)
    n = sum(len(b.detections) for b in run.batches)
    print(f"{cfg['mode']} mode: {len(run.batches)} batches, {n} detections")
    return 0


def _checkpoint_paths(base: str):
    return base, base + ".velocity", base + ".json"


def save_checkpoint(base: str, params, state: TrainState, tc: TrainConfig, arch: ArchConfig):
    w, v, meta = _checkpoint_paths(base)
    sio.write_weights(w, params)
    sio.write_weights(v, state.optimizer.velocity)
    doc = {"step": state.step, "train": asdict(tc), "arch": arch.to_dict(),
           "trace": [list(r) for r in state.trace]}
    Path(meta).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(base: str, tc: TrainConfig, arch: ArchConfig):
    w, v, meta = _checkpoint_paths(base)
    doc = json.loads(Path(meta).read_text())
    saved_tc = asdict(tc)
    saved_tc.pop("steps")
    theirs = dict(doc["train"])
    theirs.pop("steps")
    if json.loads(json.dumps(saved_tc)) != theirs or json.loads(json.dumps(arch.to_dict())) != doc["arch"]:
        raise ConfigError("checkpoint was written with a different training schedule or architecture")
    params = sio.read_weights(w, arch)
    opt = MomentumSGD(params, tc.lr, tc.momentum, tc.clip_norm)
    vel = sio.read_weights(v)
    opt.velocity = {k: vel[k].data.copy() for k in params}
    state = TrainState(doc["step"], [tuple(r) for r in doc["trace"]], opt)
    return params, state


def cmd_train(cfg: dict) -> int:
    sc = scenario_from(cfg)
    arch = arch_from(cfg)
    tc = train_config_from(cfg)
    if sc.n_packets < tc.seq_len:
        raise ConfigError(f"scenario has {sc.n_packets} packets; training needs at least {tc.seq_len}")
    ckpt = need(cfg, "checkpoint")
    every = cfg.get("checkpoint_every", 10)
    if cfg.get("resume") and Path(ckpt + ".json").exists():
        params, state = load_checkpoint(ckpt, tc, arch)
        print(f"resuming at step {state.step}")
    else:
        params, state = init_weights(arch, tc.seed), None
    frames = simulate(sc)
    print(f"sequence layout: {tc.warmup} warm-up + {tc.window} BPTT packets")

    def on_step(st):
        if st.step % every == 0 or st.step == tc.steps:
            save_checkpoint(ckpt, params, st, tc, arch)
            if "loss_trace" in cfg:
                write_trace(st.trace, cfg["loss_trace"])

    state = train(frames, params, arch, tc, state, on_step, no_memory=cfg["no_memory"], no_map=cfg["no_map"])
    save_checkpoint(ckpt, params, state, tc, arch)
    if "weights" in cfg:
        sio.write_weights(cfg["weights"], params)
    if "loss_trace" in cfg:
        write_trace(state.trace, cfg["loss_trace"])
    if state.trace:
        print(f"trained {state.step} steps, final L {state.trace[-1][3]:.4f}")
    return 0


def cmd_eval(cfg: dict) -> int:
    run = sio.read_detections(need(cfg, "detections"))
    side = sio.read_labels(need(cfg, "labels"))
    timed = "timings" in cfg and Path(cfg["timings"]).exists()
    if timed:
        ms = sio.read_timings(cfg["timings"])
        for b in run.batches:
            b.inference_ms = ms.get(b.frame)
    report = E.evaluate(run, side.tracks, side.observations, eval_config_from(cfg),
                        scenario=side.scenario.name, timings=timed)
    report["seed"] = side.scenario.seed
    text = E.report_text(report)
    if "report" in cfg:
        Path(cfg["report"]).write_text(E.report_json(report))
        Path(cfg["report"]).with_suffix(".txt").write_text(text)
    print(text, end="")
    return 0


def cmd_bench(cfg: dict) -> int:
    sc = scenario_from(cfg)
    arch = arch_from(cfg)
    params = sio.read_weights(cfg["weights"], arch) if "weights" in cfg else init_weights(arch, cfg["seed"])
    check_weights(params, arch)
    frames = simulate(sc)[:cfg.get("bench_packets", 50)]
    res = {}
    for mode in ("packet", "sweep"):
        run = infer(frames, params, arch, mode, sc.name, cfg["no_memory"], cfg["no_map"])
        res[mode] = E.latency_breakdown(run)
    res["sweep_over_packet_inference"] = res["sweep"]["inference_p50_ms"] / res["packet"]["inference_p50_ms"]
    for mode in ("packet", "sweep"):
        r = res[mode]
        print(f"{mode:6s} accumulation {r['accumulation_ms']:6.1f} ms  inference p50 {r['inference_p50_ms']:8.2f} ms"
              f"  p95 {r['inference_p95_ms']:8.2f} ms  total p50 {r['total_p50_ms']:8.2f} ms")
    print(f"sweep/packet inference ratio {res['sweep_over_packet_inference']:.2f}")
    if "report" in cfg:
        Path(cfg["report"]).write_text(json.dumps(res, sort_keys=True, indent=2) + "\n")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "infer": cmd_infer,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strobe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--mode", choices=("packet", "sweep"))
        p.add_argument("--no-memory", action="store_true", default=None)
        p.add_argument("--no-map", action="store_true", default=None)
        p.add_argument("--seed", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = sio.load_run_config(args.config)
        for key in ("mode", "no_memory", "no_map", "seed"):
            v = getattr(args, key)
            if v is not None:
                cfg[key] = v
        if cfg["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        return COMMANDS[args.command](cfg)
    except (ConfigError, sio.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

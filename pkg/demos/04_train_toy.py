"""Train the toy detector on the occlusion alley and ask whether memory helps.

Parked cars are hidden one after another by a passing vehicle. A detector with
memory can keep reporting them while they return no points; without memory it
cannot. The full 200-step run takes about a quarter of an hour on one core, so
the default here is shorter; pass a step count to change it.
"""

import sys

from strobe import scenarios
from strobe.evaluate import EvalConfig, frames_for, observations_from, score_frames
from strobe.net import ArchConfig, init_weights
from strobe.pipeline import infer
from strobe.sim import build_tracks, simulate
from strobe.train import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 40
cfg = scenarios.occlusion_alley()
frames = simulate(cfg)
tracks, obs = build_tracks(cfg), observations_from(frames)
arch = ArchConfig.toy()
params = init_weights(arch, seed=0)


def progress(state):
    if state.step % 10 == 0:
        step, l_reg, l_cls, loss = state.trace[-1]
        print(f"step {state.step:4d}  L_reg {l_reg:8.3f}  L_cls {l_cls:8.3f}  L {loss:8.3f}", flush=True)


train(frames, params, arch, TrainConfig(steps=steps), on_step=progress)

ecfg = EvalConfig()
for no_memory in (False, True):
    run = infer(frames, params, arch, "packet", cfg.name, no_memory=no_memory)
    fr = frames_for(run, obs, tracks, "emission", ecfg)
    all_ap = score_frames(run.batches, fr, ecfg)["vehicle"]["0.5"]
    hidden = score_frames(run.batches, fr, ecfg, subset=lambda f, lab: lab.actor_id not in f.returns)
    print(f"memory {'off' if no_memory else 'on ':3s}: vehicle AP@0.5 {all_ap:.3f}, "
          f"on actors with no points in the packet {hidden['vehicle']['0.5']:.3f}")

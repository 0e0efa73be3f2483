"""Intersection scenarios: MPC-APF versus a policy checkpoint, with plots.

    python demos/intersection.py [checkpoint] [trials]

Uses the stored desk-scale run in results/criterion6 when no checkpoint is given.
"""
import sys
from pathlib import Path

from raceavoid.dynamics import VehicleParams
from raceavoid.evalbench import Direction, MpcController, PolicyController, Scenario, export_plots, run_scenario, tabulate
from raceavoid.mpc import MpcApfController
from raceavoid.policy import load_checkpoint
from raceavoid.ppo import list_checkpoints
from raceavoid.world import load_scene

ckpt = sys.argv[1] if len(sys.argv) > 1 else list_checkpoints("results/criterion6")[-1][1]
trials = int(sys.argv[2]) if len(sys.argv) > 2 else 3
out = Path("results/demo-intersection")

scene = load_scene("intersection")
params, _ = load_checkpoint(ckpt)
controllers = {"MPC-APF": MpcController(MpcApfController(scene)),
               "DRL Reversed": PolicyController(params, VehicleParams())}
results = {}
for name, ctrl in controllers.items():
    results[name] = {}
    for d in Direction:
        res = run_scenario(ctrl, Scenario(d, trials=trials), seed=0, scene=scene)
        results[name][d] = res
        print(f"{name:<14} {d.value}: " + ", ".join(t.outcome for t in res.trials))

text, _ = tabulate(results)
print(text, end="")
files = export_plots(results, out, scene)
print(f"{len(files)} files under {out}")

"""Short reversed-heading PPO run on the racetrack, then a greedy evaluation.

    python demos/train_short.py [out_dir] [steps]
"""
import sys
from pathlib import Path

from raceavoid.env import EnvConfig
from raceavoid.evalbench import export_training_plot
from raceavoid.policy import load_checkpoint
from raceavoid.ppo import PpoConfig, TrainConfig, evaluate, list_checkpoints, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "results/demo-train")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 40_960

cfg = TrainConfig(ppo=PpoConfig(total_steps=steps, checkpoint_interval=steps // 2),
                  env=EnvConfig(n_obstacles=4, mode="reversed", episode_cap=1000))
train(cfg, out, seed=0)
export_training_plot(out / "curve.csv", out / "curve.svg")

for step, path in list_checkpoints(out):
    params, _ = load_checkpoint(path)
    stats = evaluate(params, cfg.env, episodes=3, seed=1)
    print(f"step {step:>8d}: reward {stats['mean_reward']:9.1f}  length {stats['mean_length']:7.1f}  "
          f"ends {stats['terminations']}")
print(f"curve: {out / 'curve.svg'}")

"""``raceavoid`` command line: ``train``, ``eval`` and ``bench``.

Exit status is 0 when every trial ran and every file was written, 1 when a
trial aborted, a checkpoint failed to load or an output could not be written,
and 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .evalbench import (Direction, MpcController, PolicyController, Scenario, bench_compute, export_plots,
                        export_training_plot, run_scenario, tabulate)
from .mpc import MpcApfController, TELEMETRY_COLUMNS
from .policy import CheckpointError, init_policy, load_checkpoint
from .ppo import TrainConfig, train
from .world import load_scene


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raceavoid", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", help="output directory for this run")

    t = sub.add_parser("train", help="train a policy with PPO on the racetrack")
    common(t)
    t.add_argument("--mode", choices=["default", "reversed"], help="ego heading at spawn")
    t.add_argument("--total-steps", type=int, help="environment steps to train for")

    e = sub.add_parser("eval", help="run the intersection scenarios")
    common(e)
    e.add_argument("--controller", action="append", required=True,
                   help="'mpc-apf' or 'ckpt:<path>[=label]'; repeat to compare several")
    e.add_argument("--scenario", action="append",
                   help="r2l, h2h or l2r (repeatable or comma separated); default all three")

    b = sub.add_parser("bench", help="FLOPs and latency of the policy versus the MPC baseline")
    common(b)
    b.add_argument("--controller", action="append",
                   help="'ckpt:<path>' for the policy weights (random init when omitted); 'mpc-apf' accepted")
    b.add_argument("--reps", type=int, help="timed policy inferences")
    return ap


def _overrides(args) -> dict:
    o = {"seed": args.seed, "out": args.out}
    if getattr(args, "mode", None):
        o["mode"] = args.mode
    if getattr(args, "total_steps", None) is not None:
        o["ppo.total_steps"] = args.total_steps
    if getattr(args, "scenario", None):
        o["scenario.directions"] = [s.strip() for item in args.scenario for s in item.split(",") if s.strip()]
    if getattr(args, "reps", None) is not None:
        o["bench.policy_reps"] = args.reps
    return o


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out) if cfg.out else Path("results") / f"{command}-seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_controller(choice: str, cfg: RunConfig):
    """Return ``(label, controller)`` for ``mpc-apf`` or ``ckpt:<path>[=label]``."""
    if choice == "mpc-apf":
        mpc = MpcApfController(load_scene(cfg.eval_scene), cfg.vehicle, cfg.apf, cfg.mpc)
        return "MPC-APF", MpcController(mpc)
    if choice.startswith("ckpt:"):
        path, _, label = choice[5:].partition("=")
        params, _ = load_checkpoint(path)
        label = label or f"DRL {Path(path).parent.name or Path(path).stem}"
        return label, PolicyController(params, cfg.vehicle, name=label)
    raise ConfigError([f"--controller: expected 'mpc-apf' or 'ckpt:<path>', got {choice!r}"])


def cmd_train(cfg: RunConfig, out: Path) -> int:
    tc = TrainConfig(ppo=cfg.ppo, env=cfg.env_config(), workers=cfg.workers, processes=cfg.processes)
    ckpts = train(tc, out, cfg.seed, mode=cfg.mode)
    export_training_plot(out / "curve.csv", out / "curve.svg")
    print(f"wrote {len(ckpts)} checkpoints and curve.csv to {out}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, specs) -> int:
    scene = load_scene(cfg.eval_scene)
    controllers = [parse_controller(s, cfg) for s in specs]
    sc = cfg.scenario
    results, aborted = {}, 0
    for label, ctrl in controllers:
        results[label] = {}
        for name in sc.directions:
            d = Direction.parse(name)
            scenario = Scenario(d, obstacle_speed=sc.obstacle_speed, trials=sc.trials, ego_speed=sc.ego_speed,
                                offset_jitter=sc.offset_jitter, delay_jitter=sc.delay_jitter, timeout=sc.timeout)
            res = run_scenario(ctrl, scenario, cfg.seed, scene=scene, vehicle=cfg.vehicle, fp=cfg.footprint)
            results[label][d] = res
            aborted += res.aborted
            counts = {o: sum(t.outcome == o for t in res.trials)
                      for o in ("success", "collision", "off_road", "timeout", "aborted")}
            print(f"{label:<24} {d.value}: {res.success_rate:5.1f}%  " +
                  "  ".join(f"{k} {v}" for k, v in counts.items()))
            for n, t in enumerate(res.trials):
                if t.outcome == "aborted":
                    print(f"  trial {n} aborted: {t.error}", file=sys.stderr)
            if res.telemetry:
                with open(out / f"telemetry_{d.slug}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(TELEMETRY_COLUMNS)
                    w.writerows(res.telemetry)
    text, table_csv = tabulate(results)
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(table_csv)
    export_plots(results, out, scene)
    print(text, end="")
    return 1 if aborted else 0


def cmd_bench(cfg: RunConfig, out: Path, specs) -> int:
    policy = None
    for s in specs or []:
        if s.startswith("ckpt:"):
            policy, _ = load_checkpoint(s[5:].partition("=")[0])
        elif s != "mpc-apf":
            raise ConfigError([f"--controller: expected 'mpc-apf' or 'ckpt:<path>', got {s!r}"])
    if policy is None:
        policy = init_policy(cfg.seed)
    mpc = MpcApfController(load_scene(cfg.eval_scene), cfg.vehicle.with_max_speed(cfg.scenario.ego_speed),
                           cfg.apf, cfg.mpc, route_yaw=math.pi / 2)
    report = bench_compute(policy, mpc, policy_reps=cfg.bench.policy_reps, mpc_reps=cfg.bench.mpc_reps)
    report.write_csv(out / "bench.csv")
    text = report.to_text()
    (out / "bench.txt").write_text(text)
    print(text, end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        out = _out_dir(cfg, args.command)
        cfg.dump(out / "config.yaml")
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out, args.controller)
        return cmd_bench(cfg, out, args.controller)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

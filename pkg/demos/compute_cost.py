"""FLOPs and per-step latency of the policy network versus the MPC-APF solver.

    python demos/compute_cost.py [policy_reps] [mpc_reps]
"""
import math
import sys

from raceavoid.mpc import MpcApfController, flops_per_iteration
from raceavoid.evalbench import bench_compute
from raceavoid.policy import count_flops, init_policy
from raceavoid.world import load_scene

policy_reps = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
mpc_reps = int(sys.argv[2]) if len(sys.argv) > 2 else 1_000

scene = load_scene("intersection")
policy = init_policy(0)            # timing and FLOPs do not depend on the weights
print(f"actor {count_flops(policy.actor):,} FLOPs, critic {count_flops(policy.critic):,} FLOPs (not run at deploy)")
print(f"MPC iteration with one obstacle: {flops_per_iteration(1, len(scene.boundary_segments)):,.0f} FLOPs")
report = bench_compute(policy, MpcApfController(scene, route_yaw=math.pi / 2), policy_reps, mpc_reps, scene=scene)
print(report.to_text(), end="")

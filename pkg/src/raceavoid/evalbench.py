"""Intersection scenarios, success tables, compute benchmark and plot export.

The ego starts south of the crossing heading north at ``ego_speed`` and
succeeds once its reference point passes ``exit_distance`` north of the
centre. The obstacle drives a straight line across the crossing at constant
speed: from the east (R to L), from the north (H to H) or from the west
(L to R). A trial fails on contact with the obstacle, on leaving the road,
or (reported separately) on timeout.
"""
from __future__ import annotations

import csv
import enum
import io
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import VehicleParams, VehicleState, step_arrays
from .env import RawAction, scale_action, TRAJECTORY_COLUMNS
from .mpc import MpcApfController, flops_per_iteration
from .policy import PolicyParams, count_flops, forward
from .world import Footprint, SceneGeometry, collisions, load_scene, points_on_track, rect_edges, scan_segments, \
    shape_scan

# published hardware success rates, % over 10 trials (R to L, H to H, L to R)
PUBLISHED_SUCCESS = {
    "MPC-APF": (70, 10, 60),
    "DRL Default": (80, 30, 70),
    "DRL Reversed Heading": (80, 60, 70),
}
PUBLISHED_COMPUTE = {"MPC-APF": (960_000, 13.2), "DRL ANN": (30_466, 0.206)}
PUBLISHED_RATIOS = {"flops": 31, "latency": 64}


class Direction(enum.Enum):
    RIGHT_TO_LEFT = "R to L"
    HEAD_TO_HEAD = "H to H"
    LEFT_TO_RIGHT = "L to R"

    @property
    def slug(self) -> str:
        return {"R to L": "r2l", "H to H": "h2h", "L to R": "l2r"}[self.value]

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "").replace(" ", "")
        for d in cls:
            if key in (d.slug, d.name.lower().replace("_", ""), d.value.lower().replace(" ", "")):
                return d
        raise ValueError(f"unknown scenario direction {value!r}")


# obstacle start (unit position on the arm) and travel direction for each scenario
_APPROACH = {
    Direction.RIGHT_TO_LEFT: ((1.0, 0.0), np.pi),
    Direction.HEAD_TO_HEAD: ((0.0, 1.0), -np.pi / 2),
    Direction.LEFT_TO_RIGHT: ((-1.0, 0.0), 0.0),
}


@dataclass
class Scenario:
    direction: Direction
    obstacle_speed: float = 1.0
    trials: int = 10
    ego_speed: float = 1.0
    approach: float = 6.0          # obstacle start distance from the centre, m
    ego_start: float = 6.0         # ego start distance south of the centre, m
    exit_distance: float = 6.0     # success once the ego is this far north of the centre
    offset_jitter: float = 0.2     # m, uniform +- along the obstacle path
    delay_jitter: float = 0.2      # s, uniform +- start delay
    timeout: float = 15.0          # s
    dt: float = 0.02

    def __post_init__(self):
        self.direction = Direction.parse(self.direction)
        if self.obstacle_speed < 0:
            raise ValueError("obstacle_speed must be non-negative")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")


@dataclass
class Trial:
    outcome: str                    # success | collision | off_road | timeout | aborted
    ego: np.ndarray                 # (T, 5) states incl. the start
    obstacle: np.ndarray            # (T, 5)
    controls: np.ndarray            # (T-1, 2)
    error: str = ""

    @property
    def success(self) -> bool:
        return self.outcome == "success"


@dataclass
class ScenarioResult:
    method: str
    scenario: Scenario
    trials: list = field(default_factory=list)
    telemetry: list = field(default_factory=list)

    @property
    def successes(self) -> int:
        return sum(t.success for t in self.trials)

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / len(self.trials)

    @property
    def aborted(self) -> int:
        return sum(t.outcome == "aborted" for t in self.trials)

    @property
    def timeouts(self) -> int:
        return sum(t.outcome == "timeout" for t in self.trials)


# ---------------------------------------------------------------------------
# controllers


class PolicyController:
    """Drives the ego from depth scans with the deterministic mean action."""

    def __init__(self, params: PolicyParams, vehicle: VehicleParams, name: str = "DRL"):
        self.params, self.vehicle, self.name = params, vehicle, name

    def reset(self):
        pass

    def act(self, ego: VehicleState, obstacles, scan):
        a = forward(self.params.actor, scan).astype(np.float64)
        return scale_action(RawAction(float(a[0]), float(a[1])), self.vehicle)


class MpcController:
    def __init__(self, mpc: MpcApfController, name: str = "MPC-APF"):
        self.mpc, self.name = mpc, name

    def configure(self, vehicle: VehicleParams, scene: SceneGeometry, route_yaw: float):
        self.mpc.params, self.mpc.scene, self.mpc.route_yaw = vehicle, scene, route_yaw

    def reset(self):
        self.mpc.reset()

    def act(self, ego, obstacles, scan):
        return self.mpc.control_step(ego, obstacles)

    @property
    def telemetry(self):
        return self.mpc.telemetry


class ConstantController:
    def __init__(self, throttle: float = 1.0, steer: float = 0.0, name: str = "constant"):
        self.throttle, self.steer, self.name = throttle, steer, name

    def reset(self):
        pass

    def act(self, ego, obstacles, scan):
        return self.throttle, self.steer


# ---------------------------------------------------------------------------
# scenario harness


def _trial_rng(seed: int, trial: int):
    return np.random.default_rng([seed, trial, 4242])


def run_trial(controller, scenario: Scenario, scene: SceneGeometry, vehicle: VehicleParams,
              fp: Footprint, seed: int, trial: int, max_range: float = 10.0) -> Trial:
    rng = _trial_rng(seed, trial)
    offset = rng.uniform(-scenario.offset_jitter, scenario.offset_jitter)
    delay = rng.uniform(-scenario.delay_jitter, scenario.delay_jitter)
    unit, o_yaw = _APPROACH[scenario.direction]
    heading = np.array([np.cos(o_yaw), np.sin(o_yaw)])
    o_start = np.array(unit) * scenario.approach - heading * offset

    ego_params = vehicle.with_max_speed(scenario.ego_speed)
    ego = np.array([[0.0, -scenario.ego_start, np.pi / 2, scenario.ego_speed, 0.0]])
    n_steps = int(round(scenario.timeout / scenario.dt))
    ego_traj, obs_traj, ctrl = [ego[0].copy()], [], []

    def obstacle_at(t):
        # a positive delay holds the obstacle in place; a negative one gives it a head start
        pos = o_start + heading * scenario.obstacle_speed * max(t - delay, 0.0)
        speed = scenario.obstacle_speed if t >= delay else 0.0
        return np.array([pos[0], pos[1], o_yaw, speed, 0.0])

    obs_traj.append(obstacle_at(0.0))
    if hasattr(controller, "configure"):
        controller.configure(ego_params, scene, np.pi / 2)
    controller.reset()
    outcome = "timeout"
    for k in range(n_steps):
        t = k * scenario.dt
        o = obs_traj[-1]
        o_state = VehicleState.from_array(o)
        e_state = VehicleState.from_array(ego[0])
        scan = scan_segments(ego[0, 0], ego[0, 1], ego[0, 2],
                             np.concatenate([scene.boundary_segments, rect_edges(o[None], fp)]), max_range)
        try:
            thr, steer = controller.act(e_state, [o_state], scan)
            if not (np.isfinite(thr) and np.isfinite(steer)):
                raise FloatingPointError("controller returned non-finite controls")
        except Exception as exc:        # noqa: BLE001 - reported as an aborted trial
            return Trial("aborted", np.array(ego_traj), np.array(obs_traj), np.array(ctrl).reshape(-1, 2),
                         f"{type(exc).__name__}: {exc}")
        ego = step_arrays(ego, [thr], [steer], ego_params)
        ctrl.append((thr, steer))
        ego_traj.append(ego[0].copy())
        obs_traj.append(obstacle_at(t + scenario.dt))
        if collisions(ego, fp, obs_traj[-1][None], fp)[0]:
            outcome = "collision"
            break
        if not points_on_track(ego[:, :2], scene)[0]:
            outcome = "off_road"
            break
        if ego[0, 1] >= scenario.exit_distance and abs(ego[0, 0]) <= _road_half_width(scene):
            outcome = "success"
            break
    return Trial(outcome, np.array(ego_traj), np.array(obs_traj), np.array(ctrl).reshape(-1, 2))


def _road_half_width(scene: SceneGeometry) -> float:
    # the north-south road polygon spans +-half_width in x
    return float(max(np.abs(p[:, 0]).min() for p in scene.drivable_regions))


def run_scenario(controller, scenario: Scenario, seed: int, scene: SceneGeometry | None = None,
                 vehicle: VehicleParams = VehicleParams(), fp: Footprint = Footprint()) -> ScenarioResult:
    """Run ``scenario.trials`` seeded trials; fully determined by (controller, scenario, seed)."""
    scene = scene or load_scene("intersection")
    result = ScenarioResult(getattr(controller, "name", type(controller).__name__), scenario)
    for n in range(scenario.trials):
        result.trials.append(run_trial(controller, scenario, scene, vehicle, fp, seed, n))
        result.telemetry.extend(getattr(controller, "telemetry", []) or [])
    return result


# ---------------------------------------------------------------------------
# tables


def _cell(res) -> str:
    return "" if res is None else f"{res.success_rate:.0f}"


def tabulate(results: dict, include_reference: bool = True):
    """Format ``{method: {Direction: ScenarioResult}}`` like the published success table.

    Returns ``(text, csv_text)``. Missing directions are left blank ("-" in
    text). Reference rows are the published hardware figures.
    """
    if not results:
        raise ValueError("nothing to tabulate")
    dirs = list(Direction)
    rows = []
    for method, per_dir in results.items():
        cells = [_cell(per_dir.get(d)) for d in dirs]
        rows.append((method, "simulation", cells))
    if include_reference:
        for method, vals in PUBLISHED_SUCCESS.items():
            rows.append((method, "published hardware", [str(v) for v in vals]))

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "source"] + [d.value for d in dirs])
    for method, source, cells in rows:
        w.writerow([method, source] + cells)

    width = max(len(r[0]) for r in rows) + 2
    head = f"{'Method':<{width}}{'Source':<21}" + "".join(f"{d.value:>8}" for d in dirs)
    lines = ["Collision Avoidance Success Rate (%)", head, "-" * len(head)]
    for method, source, cells in rows:
        lines.append(f"{method:<{width}}{source:<21}" + "".join(f"{(c or '-'):>8}" for c in cells))
    return "\n".join(lines) + "\n", buf.getvalue()


# ---------------------------------------------------------------------------
# compute benchmark


def bench_fixtures(scene: SceneGeometry | None = None, per_direction: int = 6):
    """Ego/obstacle state pairs sampled along each conflict approach."""
    scene = scene or load_scene("intersection")
    out = []
    for d in Direction:
        unit, yaw = _APPROACH[d]
        for k in range(per_direction):
            t = 1.0 + 4.0 * k / max(per_direction - 1, 1)
            ego = VehicleState(0.0, -6.0 + t, np.pi / 2, 1.0, 0.0)
            pos = np.array(unit) * 6.0 + np.array([np.cos(yaw), np.sin(yaw)]) * t
            out.append((ego, VehicleState(pos[0], pos[1], yaw, 1.0, 0.0)))
    return out


def synthetic_lidar(ego: VehicleState, obstacle: VehicleState, scene: SceneGeometry, fp: Footprint,
                    n: int = 3200, max_range: float = 10.0, dropout: float = 0.02, seed: int = 0):
    """360-degree raw scan (counter-clockwise, index 0 at the heading) with zero dropouts."""
    offsets = np.arange(n) * (2 * np.pi / n)
    segs = np.concatenate([scene.boundary_segments, rect_edges(obstacle.as_array()[None], fp)])
    raw = scan_segments(ego.x, ego.y, ego.yaw, segs, max_range, offsets=offsets, normalize=False)
    raw = np.where(raw >= max_range, 0.0, raw)   # no return
    rng = np.random.default_rng(seed)
    raw[rng.random(n) < dropout] = 0.0
    return raw


@dataclass
class BenchReport:
    policy_flops: int
    mpc_flops: float
    mpc_flops_per_iteration: float
    mpc_mean_iterations: float
    policy_median_ms: float
    policy_p95_ms: float
    preprocess_median_ms: float
    policy_inclusive_median_ms: float
    mpc_median_ms: float
    mpc_p95_ms: float
    policy_samples: int
    mpc_samples: int
    timing_method: str = "per-call"

    @property
    def flops_ratio(self) -> float:
        return self.mpc_flops / self.policy_flops

    @property
    def latency_ratio(self) -> float:
        return self.mpc_median_ms / self.policy_median_ms

    def rows(self):
        return [
            ("method", "flops", "median_ms", "p95_ms", "published_flops", "published_ms"),
            ("MPC-APF", round(self.mpc_flops), self.mpc_median_ms, self.mpc_p95_ms, *PUBLISHED_COMPUTE["MPC-APF"]),
            ("DRL ANN", self.policy_flops, self.policy_median_ms, self.policy_p95_ms, *PUBLISHED_COMPUTE["DRL ANN"]),
            ("DRL ANN + scan shaping", self.policy_flops, self.policy_inclusive_median_ms, "", "", ""),
        ]

    def to_text(self) -> str:
        lines = ["Computation Cost", f"{'Method':<24}{'FLOPS':>12}{'median ms':>12}{'p95 ms':>10}"
                 f"{'published FLOPS':>17}{'published ms':>14}"]
        lines.append(f"{'MPC-APF':<24}{self.mpc_flops:>12,.0f}{self.mpc_median_ms:>12.4f}{self.mpc_p95_ms:>10.4f}"
                     f"{PUBLISHED_COMPUTE['MPC-APF'][0]:>17,}{PUBLISHED_COMPUTE['MPC-APF'][1]:>14}")
        lines.append(f"{'DRL ANN':<24}{self.policy_flops:>12,}{self.policy_median_ms:>12.4f}{self.policy_p95_ms:>10.4f}"
                     f"{PUBLISHED_COMPUTE['DRL ANN'][0]:>17,}{PUBLISHED_COMPUTE['DRL ANN'][1]:>14}")
        lines.append(f"{'DRL ANN + scan shaping':<24}{'':>12}{self.policy_inclusive_median_ms:>12.4f}")
        lines.append(f"MPC mean iterations {self.mpc_mean_iterations:.2f}, "
                     f"{self.mpc_flops_per_iteration:,.0f} FLOPs per iteration")
        lines.append(f"ratios: FLOPs {self.flops_ratio:.1f}x (published {PUBLISHED_RATIOS['flops']}x), "
                     f"latency {self.latency_ratio:.1f}x (published {PUBLISHED_RATIOS['latency']}x)")
        lines.append(f"samples: policy {self.policy_samples}, MPC {self.mpc_samples}; timing {self.timing_method}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())


def _timed(fn, batch: int) -> float:
    t0 = time.perf_counter_ns()
    for _ in range(batch):
        fn()
    return (time.perf_counter_ns() - t0) / batch


def bench_compute(policy: PolicyParams, mpc: MpcApfController, policy_reps: int = 10_000, mpc_reps: int = 1_000,
                  scene: SceneGeometry | None = None, fp: Footprint = Footprint()) -> BenchReport:
    """Interleaved wall-clock timing of policy inference and MPC solves on shared fixtures."""
    scene = scene or load_scene("intersection")
    mpc.scene = scene
    if mpc.route_yaw is None:
        mpc.route_yaw = np.pi / 2     # fixtures drive north through the crossing
    fixtures = bench_fixtures(scene)
    scans = [scan_segments(e.x, e.y, e.yaw, np.concatenate([scene.boundary_segments,
                                                             rect_edges(o.as_array()[None], fp)]))
             for e, o in fixtures]
    raws = [synthetic_lidar(e, o, scene, fp, seed=i) for i, (e, o) in enumerate(fixtures)]

    # warm-up
    for s in scans:
        forward(policy.actor, s)
    mpc.reset()
    for e, o in fixtures:
        mpc.control_step(e, [o])

    tick_ns = time.get_clock_info("perf_counter").resolution * 1e9
    probe = statistics.median(_timed(lambda: forward(policy.actor, scans[0]), 1) for _ in range(50))
    batch = 1 if probe >= 100 * tick_ns else int(np.ceil(100 * tick_ns / max(probe, 1.0)))
    method = "per-call" if batch == 1 else f"batched x{batch} (timer resolution {tick_ns:.0f} ns)"

    pol, pre, mpc_t, iters, evals = [], [], [], [], []
    per_round = max(1, int(np.ceil(policy_reps / mpc_reps)))
    mpc.reset()
    k = 0
    while len(pol) < policy_reps or len(mpc_t) < mpc_reps:
        i = k % len(fixtures)
        if len(pol) < policy_reps:
            for _ in range(per_round):
                s = scans[(k + _) % len(scans)]
                pol.append(_timed(lambda: forward(policy.actor, s), batch))
                raw = raws[(k + _) % len(raws)]
                pre.append(_timed(lambda: shape_scan(raw, 0), batch))
        if len(mpc_t) < mpc_reps:
            e, o = fixtures[i]
            t0 = time.perf_counter_ns()
            mpc.control_step(e, [o])
            mpc_t.append(time.perf_counter_ns() - t0)
            iters.append(mpc.solutions[-1].iterations)
            evals.append(mpc.solutions[-1].cost_evals)
            mpc.solutions.clear()
        k += 1

    mean_iters = float(np.mean(iters))
    # three evaluations pick the warm start; the rest belong to the iterations
    evals_per_iter = max(float(np.mean(evals)) - 3.0, 0.0) / max(mean_iters, 1e-9)
    per_iter = flops_per_iteration(1, len(scene.boundary_segments), mpc.cfg.horizon, evals_per_iter)
    pol_ms = np.array(pol) / 1e6
    pre_ms = np.array(pre) / 1e6
    mpc_ms = np.array(mpc_t) / 1e6
    return BenchReport(
        policy_flops=count_flops(policy.actor),
        mpc_flops=per_iter * mean_iters,
        mpc_flops_per_iteration=per_iter,
        mpc_mean_iterations=mean_iters,
        policy_median_ms=float(np.median(pol_ms)),
        policy_p95_ms=float(np.percentile(pol_ms, 95)),
        preprocess_median_ms=float(np.median(pre_ms)),
        policy_inclusive_median_ms=float(np.median(pol_ms + pre_ms)),
        mpc_median_ms=float(np.median(mpc_ms)),
        mpc_p95_ms=float(np.percentile(mpc_ms, 95)),
        policy_samples=len(pol),
        mpc_samples=len(mpc_t),
        timing_method=method,
    )


# ---------------------------------------------------------------------------
# export


def trial_rows(trial: Trial):
    """Trajectory rows in the simulator's log format (ego id 0, obstacle id 1)."""
    rows = []
    n = len(trial.ego)
    for k in range(n):
        term = trial.outcome if k == n - 1 and k > 0 else "running"
        thr, st = trial.controls[k - 1] if k > 0 else (0.0, 0.0)
        e = trial.ego[k]
        rows.append((k, 0, *map(float, e[:4]), float(thr), float(st), 0.0, term))
        if k < len(trial.obstacle):
            o = trial.obstacle[k]
            rows.append((k, 1, *map(float, o[:4]), 0.0, 0.0, 0.0, term))
    return rows


def write_rows_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        w.writerows(rows)


def time_colors(n: int, base: str):
    """``n`` colours darkening monotonically with time; ``base`` is 'green' or 'red'."""
    if n <= 0:
        return []
    frac = np.linspace(0.0, 1.0, n)
    light = (205 - 175 * frac).round().astype(int)   # channel value for the non-dominant channels
    strong = (235 - 115 * frac).round().astype(int)
    if base == "green":
        return [f"rgb({l},{s},{l})" for l, s in zip(light, strong)]
    return [f"rgb({s},{l},{l})" for l, s in zip(light, strong)]


def trajectory_svg(scene: SceneGeometry, paths, size: int = 480, margin: float = 0.5) -> str:
    """SVG with the scene walls and time-graded polylines; ``paths`` = [(xy (T,2), 'green'|'red')]."""
    pts = [scene.boundary_segments.reshape(-1, 2)] + [np.asarray(p)[:, :2] for p, _ in paths if len(p)]
    allp = np.concatenate(pts)
    lo, hi = allp.min(0) - margin, allp.max(0) + margin
    scale = size / float(max(hi - lo))

    def tx(p):
        return (p[0] - lo[0]) * scale, (hi[1] - p[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    for a, b in scene.boundary_segments:
        (x1, y1), (x2, y2) = tx(a), tx(b)
        out.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="black" stroke-width="2"/>')
    for path, base in paths:
        path = np.asarray(path)
        colors = time_colors(len(path) - 1, base)
        for k in range(len(path) - 1):
            (x1, y1), (x2, y2) = tx(path[k]), tx(path[k + 1])
            out.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                       f'stroke="{colors[k]}" stroke-width="3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in name.lower()).strip("-")


def export_plots(results: dict, out_dir, scene: SceneGeometry | None = None) -> list:
    """Write ``trials/<dir>/<method>_<n>.csv`` and ``plots/<method>_<dir>_<n>.svg`` per trial."""
    scene = scene or load_scene("intersection")
    out = Path(out_dir)
    written = []
    for method, per_dir in results.items():
        for d, res in per_dir.items():
            tdir = out / "trials" / d.slug
            pdir = out / "plots"
            tdir.mkdir(parents=True, exist_ok=True)
            pdir.mkdir(parents=True, exist_ok=True)
            for n, trial in enumerate(res.trials):
                csv_path = tdir / f"{_slug(method)}_{n}.csv"
                write_rows_csv(trial_rows(trial), csv_path)
                svg_path = pdir / f"{_slug(method)}_{d.slug}_{n}.svg"
                svg_path.write_text(trajectory_svg(scene, [(trial.ego, "green"), (trial.obstacle, "red")]))
                written += [csv_path, svg_path]
    return written


def export_training_plot(curve_csv, svg_path, column: str = "mean_episode_reward", size: int = 480) -> None:
    with open(curve_csv) as fh:
        rows = [r for r in csv.DictReader(fh) if r[column] not in ("", "nan")]
    steps = np.array([float(r["step"]) for r in rows]) if rows else np.zeros(0)
    vals = np.array([float(r[column]) for r in rows]) if rows else np.zeros(0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size // 2}">',
           '<rect width="100%" height="100%" fill="white"/>']
    if len(rows) > 1:
        x = (steps - steps.min()) / max(np.ptp(steps), 1e-12) * (size - 20) + 10
        y = (1 - (vals - vals.min()) / max(np.ptp(vals), 1e-12)) * (size // 2 - 20) + 10
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(x, y))
        out.append(f'<polyline points="{pts}" fill="none" stroke="navy" stroke-width="2"/>')
    out.append("</svg>")
    Path(svg_path).write_text("\n".join(out) + "\n")

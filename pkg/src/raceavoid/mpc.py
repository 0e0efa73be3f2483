"""MPC-APF baseline: linearised bicycle model, potential-field cost, projected gradient.

The prediction model is the explicit-Euler kinematic bicycle with state
``[x, y, yaw, v]`` and controls ``[throttle, steer]``, linearised once per
control step about the current state and zero controls:

    s_{k+1} = A s_k + B u_k + c

Jacobian entries at ``(x, y, yaw, v)`` with step ``h`` (all other entries of
``A - I`` and ``B`` are zero)::

    A[0, 2] = -h v sin(yaw)      A[0, 3] = h cos(yaw)
    A[1, 2] =  h v cos(yaw)      A[1, 3] = h sin(yaw)
    A[3, 3] = 1 - 2 h c_d v / m
    B[2, 1] =  h v / wheelbase   B[3, 0] = h c_m / m

The cost over the predicted positions ``p_1..p_N`` is

    sum_t [ sum_obs q_obs / (d(p_t, obstacle path) + eps)
          + sum_wall q_bound / (d(p_t, wall) + eps)
          + w_ctrl |u_{t-1}|^2 - w_prog (p_t - p_0) . heading_0 ]

where each obstacle path is the segment swept by the obstacle over the
horizon at constant velocity (a line charge).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import VehicleParams, VehicleState
from .world import SceneGeometry, point_segment_distance

NX, NU = 4, 2


@dataclass
class ApfCost:
    q_obs: float = 1.0
    q_bound: float = 0.05
    eps_d: float = 0.05
    w_ctrl: float = 0.01
    w_prog: float = 1.0

    def __post_init__(self):
        if min(self.q_obs, self.q_bound, self.w_ctrl, self.w_prog) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.eps_d <= 0:
            raise ValueError("eps_d must be positive")


@dataclass
class MpcConfig:
    horizon: int = 10
    dt_mpc: float = 0.05
    max_iters: int = 20
    rel_tol: float = 1e-4
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    step_init: float = 1.0
    side_steer: float = 0.5       # fraction of the steering range tried as lateral warm starts


@dataclass
class MpcSolution:
    controls: np.ndarray
    iterations: int
    cost_trace: list
    cost_evals: int = 0
    fallback: bool = False

    @property
    def first(self):
        return float(self.controls[0, 0]), float(self.controls[0, 1])


def bicycle_step(s, u, params: VehicleParams, dt: float) -> np.ndarray:
    """Nonlinear explicit-Euler kinematic bicycle used as the prediction model."""
    x, y, yaw, v = s
    thr, steer = u
    return np.array([
        x + dt * v * np.cos(yaw),
        y + dt * v * np.sin(yaw),
        yaw + dt * v / params.wheelbase * np.tan(steer),
        v + dt * (params.c_m * thr - params.c_d * v * v - params.c_r * np.sign(v)) / params.mass,
    ])


def linearize_bicycle(state, params: VehicleParams, dt_mpc: float):
    """Analytic ``(A, B)`` of :func:`bicycle_step` about ``state`` and zero controls."""
    if isinstance(state, VehicleState):
        x, y, yaw, v = state.x, state.y, state.yaw, state.v
    else:
        x, y, yaw, v = state[:4]
    h = dt_mpc
    A = np.eye(NX)
    A[0, 2] = -h * v * np.sin(yaw)
    A[0, 3] = h * np.cos(yaw)
    A[1, 2] = h * v * np.cos(yaw)
    A[1, 3] = h * np.sin(yaw)
    A[3, 3] = 1.0 - 2.0 * h * params.c_d * v / params.mass
    B = np.zeros((NX, NU))
    B[2, 1] = h * v / params.wheelbase
    B[3, 0] = h * params.c_m / params.mass
    return A, B


def obstacle_paths(obstacles, horizon_time: float) -> np.ndarray:
    """Constant-velocity line segments ``(n, 2, 2)`` swept by each obstacle."""
    segs = []
    for o in obstacles:
        start = np.array([o.x, o.y])
        vel = o.v * np.array([np.cos(o.yaw), np.sin(o.yaw)])
        end = start + vel * horizon_time
        if np.allclose(end, start):
            end = start + 1e-9 * np.array([np.cos(o.yaw), np.sin(o.yaw)])
        segs.append((start, end))
    return np.array(segs, dtype=np.float64).reshape(-1, 2, 2)


def _charge_terms(points, segments, q, eps):
    """Potential ``sum q/(d+eps)`` over segments and its gradient w.r.t. each point."""
    if len(segments) == 0 or q == 0:
        return 0.0, np.zeros_like(points)
    a, b = segments[:, 0], segments[:, 1]
    d = b - a
    dd = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)    # point charges have d = 0
    rel = points[:, None, :] - a[None]
    t = np.clip(np.einsum("nmj,mj->nm", rel, d) / dd, 0.0, 1.0)
    diff = rel - t[..., None] * d[None]
    dist = np.sqrt(np.einsum("nmj,nmj->nm", diff, diff))
    phi = q / (dist + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    grad = np.einsum("nm,nmj->nj", -phi / (dist + eps), unit)
    return float(phi.sum()), grad


class MpcProblem:
    """Linearised horizon-``N`` prediction plus the APF cost for one control step."""

    def __init__(self, state: VehicleState, obstacles, scene: SceneGeometry | None, cost: ApfCost,
                 params: VehicleParams, cfg: MpcConfig, route_yaw: float | None = None):
        self.cost, self.params, self.cfg = cost, params, cfg
        n, h = cfg.horizon, cfg.dt_mpc
        s0 = np.array([state.x, state.y, state.yaw, state.v])
        self.s0 = s0
        self.A, self.B = linearize_bicycle(s0, params, h)
        c = bicycle_step(s0, (0.0, 0.0), params, h) - self.A @ s0
        # stacked prediction: X (N*4) = free + G u (N*2)
        self.free = np.zeros((n, NX))
        self.G = np.zeros((n * NX, n * NU))
        s = s0
        powers = [np.eye(NX)]
        for k in range(n):
            s = self.A @ s + c
            self.free[k] = s
            powers.append(self.A @ powers[-1])
        for t in range(n):
            for k in range(t + 1):
                self.G[t * NX:(t + 1) * NX, k * NU:(k + 1) * NU] = powers[t - k] @ self.B
        self.free = self.free.reshape(-1)
        # progress is measured along the route direction when one is given, else along the current yaw
        yaw = state.yaw if route_yaw is None else route_yaw
        self.heading = np.array([np.cos(yaw), np.sin(yaw)])
        self.obstacles = obstacle_paths(obstacles, n * h) if len(obstacles) else np.zeros((0, 2, 2))
        self.walls = scene.boundary_segments if scene is not None else np.zeros((0, 2, 2))
        self.lower = np.tile([0.0, params.delta_min], n)
        self.upper = np.tile([1.0, params.delta_max], n)
        self.evals = 0

    def predict(self, u) -> np.ndarray:
        """Predicted states ``(N, 4)`` for a control sequence ``(N, 2)``."""
        return (self.free + self.G @ np.asarray(u).reshape(-1)).reshape(-1, NX)

    def value_and_grad(self, u, need_grad: bool = True):
        u = np.asarray(u, dtype=np.float64).reshape(-1, NU)
        self.evals += 1
        X = self.predict(u)
        pts = X[:, :2]
        c = self.cost
        j_obs, g_obs = _charge_terms(pts, self.obstacles, c.q_obs, c.eps_d)
        j_wall, g_wall = _charge_terms(pts, self.walls, c.q_bound, c.eps_d)
        j_ctrl = c.w_ctrl * float(np.sum(u * u))
        j_prog = -c.w_prog * float(np.sum((pts - self.s0[:2]) @ self.heading))
        total = j_obs + j_wall + j_ctrl + j_prog
        if not need_grad:
            return total, None
        dX = np.zeros_like(X)
        dX[:, :2] = g_obs + g_wall - c.w_prog * self.heading
        grad = self.G.T @ dX.reshape(-1) + 2.0 * c.w_ctrl * u.reshape(-1)
        return total, grad.reshape(-1, NU)

    def wall_clearance(self, u) -> float:
        if len(self.walls) == 0:
            return np.inf
        return float(point_segment_distance(self.predict(u)[:, :2], self.walls).min())

    def project(self, u):
        return np.clip(u.reshape(-1), self.lower, self.upper).reshape(-1, NU)


def apf_cost(trajectory, obstacles, scene, cost: ApfCost, controls=None, heading=None) -> float:
    """APF cost of an explicit trajectory ``(N+1, >=2)`` (row 0 is the current state).

    ``obstacles`` are predicted segments ``(n, 2, 2)``; ``controls`` ``(N, 2)``
    default to zero and ``heading`` to the yaw of row 0 (zero if absent).
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    pts = traj[1:, :2]
    obstacles = np.asarray(obstacles, dtype=np.float64).reshape(-1, 2, 2)
    walls = scene.boundary_segments if scene is not None else np.zeros((0, 2, 2))
    j_obs, _ = _charge_terms(pts, obstacles, cost.q_obs, cost.eps_d)
    j_wall, _ = _charge_terms(pts, walls, cost.q_bound, cost.eps_d)
    j_ctrl = 0.0 if controls is None else cost.w_ctrl * float(np.sum(np.asarray(controls) ** 2))
    if heading is None:
        yaw = traj[0, 2] if traj.shape[1] > 2 else 0.0
        heading = np.array([np.cos(yaw), np.sin(yaw)])
    j_prog = -cost.w_prog * float(np.sum((pts - traj[0, :2]) @ heading))
    return j_obs + j_wall + j_ctrl + j_prog


def solve_mpc(state: VehicleState, obstacles, scene, warm_start, cost: ApfCost,
              params: VehicleParams = VehicleParams(), cfg: MpcConfig = MpcConfig(),
              route_yaw: float | None = None) -> MpcSolution:
    """Projected gradient descent with Armijo backtracking on the control sequence.

    Starts from the best of the warm start and two laterally biased copies of
    it; an exact left/right tie goes to the side with more wall clearance.
    Iterates stop after ``max_iters`` or when the relative cost decrease falls
    below ``rel_tol``. ``cost_trace`` holds the cost of every accepted iterate.
    """
    prob = MpcProblem(state, obstacles, scene, cost, params, cfg, route_yaw)
    n = cfg.horizon
    base = np.zeros((n, NU)) if warm_start is None else np.asarray(warm_start, dtype=np.float64).reshape(n, NU)
    base = prob.project(base)

    side = cfg.side_steer * min(params.delta_max, -params.delta_min)
    left, right = base.copy(), base.copy()
    left[:, 1], right[:, 1] = side, -side
    j_base = prob.value_and_grad(base, need_grad=False)[0]
    j_left = prob.value_and_grad(left, need_grad=False)[0]
    j_right = prob.value_and_grad(right, need_grad=False)[0]
    u, j = base, j_base
    if min(j_left, j_right) < j_base:
        tie = abs(j_left - j_right) <= 1e-12 * max(1.0, abs(j_left))
        if tie:
            go_left = prob.wall_clearance(left) >= prob.wall_clearance(right)
        else:
            go_left = j_left < j_right
        u, j = (left, j_left) if go_left else (right, j_right)

    if not np.isfinite(j):
        return MpcSolution(np.zeros((n, NU)), 0, [j], prob.evals, fallback=True)

    scale = np.tile([1.0, (params.delta_max - params.delta_min) ** 2], n).reshape(n, NU)
    trace = [j]
    iters = 0
    step = cfg.step_init
    while iters < cfg.max_iters:
        iters += 1
        _, g = prob.value_and_grad(u)
        if not np.all(np.isfinite(g)):
            return MpcSolution(np.zeros((n, NU)), iters, trace, prob.evals, fallback=True)
        accepted = False
        for _ in range(cfg.max_backtracks):
            cand = prob.project(u - step * scale * g)
            move = cand - u
            if not np.any(move):
                break
            j_new = prob.value_and_grad(cand, need_grad=False)[0]
            if np.isfinite(j_new) and j_new <= j + cfg.armijo * float(np.sum(g * move)):
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            break
        rel = (j - j_new) / max(abs(j), 1e-12)
        u, j = cand, j_new
        trace.append(j)
        step = min(step * 2.0, cfg.step_init * 4.0)
        if rel < cfg.rel_tol:
            break
    return MpcSolution(u, iters, trace, prob.evals)


def flops_per_cost_eval(n_obstacles: int, n_walls: int, horizon: int = 10) -> int:
    """Operation inventory of one cost evaluation in :meth:`MpcProblem.value_and_grad`."""
    n = horizon
    rollout = 2 * (NX * n) * (NU * n) + NX * n            # G @ u plus free response
    per_pair = 19                                         # projection, clamp, distance, q/(d+eps)
    charges = n * (n_obstacles + n_walls) * per_pair
    ctrl = 2 * NU * n + 1
    prog = n * (2 + 3) + n                                # (p - p0) . heading, summed
    return rollout + charges + ctrl + prog + 4


def flops_per_gradient(n_obstacles: int, n_walls: int, horizon: int = 10) -> int:
    n = horizon
    per_pair = 9                                          # unit vector and scaled accumulation
    charges = n * (n_obstacles + n_walls) * per_pair
    back = 2 * (NX * n) * (NU * n) + 3 * NU * n + 2 * n
    return flops_per_cost_eval(n_obstacles, n_walls, horizon) + charges + back


def flops_per_iteration(n_obstacles: int, n_walls: int, horizon: int = 10,
                        evals_per_iteration: float = 1.0) -> float:
    """One gradient plus the average number of line-search cost evaluations."""
    return (flops_per_gradient(n_obstacles, n_walls, horizon)
            + evals_per_iteration * flops_per_cost_eval(n_obstacles, n_walls, horizon))


@dataclass
class MpcApfController:
    """Receding-horizon wrapper with a shifted warm start and per-step telemetry."""

    scene: SceneGeometry | None
    params: VehicleParams = field(default_factory=VehicleParams)
    cost: ApfCost = field(default_factory=ApfCost)
    cfg: MpcConfig = field(default_factory=MpcConfig)
    telemetry: list = field(default_factory=list)
    name: str = "MPC-APF"
    route_yaw: float | None = None

    def __post_init__(self):
        self.warm = None
        self.solutions = []

    def reset(self):
        self.warm = None
        self.telemetry = []
        self.solutions = []

    def control_step(self, state: VehicleState, obstacles):
        t0 = time.perf_counter_ns()
        sol = solve_mpc(state, obstacles, self.scene, self.warm, self.cost, self.params, self.cfg,
                        self.route_yaw)
        wall = time.perf_counter_ns() - t0
        self.warm = np.vstack([sol.controls[1:], sol.controls[-1:]])
        self.telemetry.append((len(self.telemetry), sol.iterations, sol.cost_trace[0], sol.cost_trace[-1], wall))
        self.solutions.append(sol)
        thr, steer = sol.first
        return min(max(thr, 0.0), 1.0), max(min(steer, self.params.delta_max), self.params.delta_min)


def mpc_control_step(controller: MpcApfController, state: VehicleState, obstacles, scene=None):
    if scene is not None:
        controller.scene = scene
    return controller.control_step(state, obstacles)


TELEMETRY_COLUMNS = ("step", "iterations", "cost_initial", "cost_final", "wall_ns")

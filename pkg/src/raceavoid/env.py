"""Racing MDP: observation assembly, action scaling, reward and termination.

Collisions and leaving the track end the episode without any penalty. The
transition is flagged ``terminal`` so the learner bootstraps a zero value
there; the lost future ``5*T**2`` stream is the deterrent. Hitting the step
cap is flagged ``truncated`` and bootstraps with the critic.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .agents import HeadingMode, ObstacleController, ego_params, pursuit_controls, spawn_training_scene
from .dynamics import VehicleParams, VehicleState, step_arrays
from .world import (DEFAULT_MAX_RANGE, Footprint, SceneGeometry, collisions, load_scene, points_on_track,
                    rect_edges, scan_segments)

REVERSAL_PENALTY = -2.0
THROTTLE_REWARD_GAIN = 5.0


class Termination(enum.Enum):
    RUNNING = "running"
    COLLISION = "collision"
    OFF_TRACK = "off_track"
    TIME_LIMIT = "time_limit"


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RawAction:
    a_T: float
    a_delta: float

    def __post_init__(self):
        if not (np.isfinite(self.a_T) and np.isfinite(self.a_delta)):
            raise ValueError("raw action must be finite")


@dataclass
class Transition:
    observation: np.ndarray
    raw_action: RawAction
    scaled: tuple
    reward: float
    termination: Termination
    prev_a_delta: float

    @property
    def terminal(self) -> bool:
        return self.termination in (Termination.COLLISION, Termination.OFF_TRACK)

    @property
    def truncated(self) -> bool:
        return self.termination is Termination.TIME_LIMIT


def scale_action(raw: RawAction, params: VehicleParams):
    """Map a policy output to ``(throttle, steer)``.

    Throttle is ``min(max(a_T, 0), 1)``. The steering output is mapped
    linearly from ``[-1, 1]`` onto ``[delta_min, delta_max]`` and then clamped
    to that range.
    """
    throttle = min(max(raw.a_T, 0.0), 1.0)
    span = params.delta_max - params.delta_min
    steer = params.delta_min + (raw.a_delta + 1.0) * 0.5 * span
    steer = max(min(steer, params.delta_max), params.delta_min)
    return throttle, steer


def normalized_steer(a_delta: float) -> float:
    return min(max(a_delta, -1.0), 1.0)


def compute_reward(throttle: float, a_delta_prev: float, a_delta_curr: float, eps: float = 1e-6) -> float:
    """``5*T**2``, replaced by -2.0 on a full-lock to full-lock steering reversal."""
    if a_delta_prev * a_delta_curr <= -1.0 + eps:
        return REVERSAL_PENALTY
    return THROTTLE_REWARD_GAIN * throttle * throttle


@dataclass
class EnvConfig:
    scene: str = "racetrack"
    n_obstacles: int = 15
    mode: str = "default"
    speed_advantage: float = 1.5
    episode_cap: int = 5000
    max_range: float = DEFAULT_MAX_RANGE
    offtrack_terminal: bool = True
    reversal_eps: float = 1e-6
    obstacle_lookahead: float = 1.2
    obstacle_speed_scale: float = 0.8
    obstacle_kp: float = 2.0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    footprint: Footprint = field(default_factory=Footprint)


class RacingEnv:
    """Ego car plus scripted followers on a closed track.

    Not thread-safe; use one instance per worker.
    """

    def __init__(self, cfg: EnvConfig | None = None, scene: SceneGeometry | None = None):
        self.cfg = cfg or EnvConfig()
        self.scene = scene if scene is not None else load_scene(self.cfg.scene)
        self.mode = HeadingMode.parse(self.cfg.mode)
        self.obstacle_params = self.cfg.vehicle
        self.ego_params = ego_params(self.cfg.vehicle, self.cfg.speed_advantage)
        self.fp = self.cfg.footprint
        self.states = np.zeros((1, 5))
        self.progress = np.zeros(0)
        self.prev_a_delta = 0.0
        self.steps = 0
        self.done = True
        self.log = None

    # -- episode control ---------------------------------------------------
    def reset(self, seed: int, mode=None) -> np.ndarray:
        if mode is not None:
            self.mode = HeadingMode.parse(mode)
        template = ObstacleController(self.cfg.obstacle_lookahead, self.cfg.obstacle_speed_scale, 0.0,
                                      self.cfg.obstacle_kp)
        spawned = spawn_training_scene(self.mode, self.cfg.n_obstacles, self.scene, seed, self.fp,
                                       self.obstacle_params, template)
        self.place(spawned[0][0], [st for st, _ in spawned[1:]])
        self.progress = np.array([c.centerline_progress for _, c in spawned[1:]])
        return self.observe()

    def place(self, ego: VehicleState, obstacles=()) -> np.ndarray:
        """Start a new episode from explicit poses (used by tests and demos)."""
        self.states = np.array([ego.as_array()] + [o.as_array() for o in obstacles])
        self.progress = None
        self.prev_a_delta = 0.0
        self.steps = 0
        self.done = False
        if self.log is not None:
            self.log.clear()
        return self.observe()

    def observe(self) -> np.ndarray:
        segs = self.scene.boundary_segments
        if len(self.states) > 1:
            segs = np.concatenate([segs, rect_edges(self.states[1:], self.fp)], axis=0)
        ego = self.states[0]
        return scan_segments(ego[0], ego[1], ego[2], segs, self.cfg.max_range)

    @property
    def ego(self) -> VehicleState:
        return VehicleState.from_array(self.states[0])

    def enable_logging(self):
        self.log = []

    # -- stepping ----------------------------------------------------------
    def step(self, raw: RawAction) -> Transition:
        if self.done:
            raise EpisodeFinishedError("episode has finished; call reset()")
        if not isinstance(raw, RawAction):
            raw = RawAction(float(raw[0]), float(raw[1]))
        throttle, steer = scale_action(raw, self.ego_params)
        a_curr = normalized_steer(raw.a_delta)
        prev = self.prev_a_delta
        reward = compute_reward(throttle, prev, a_curr, self.cfg.reversal_eps)

        new = np.empty_like(self.states)
        new[:1] = step_arrays(self.states[:1], [throttle], [steer], self.ego_params)
        n_obs = len(self.states) - 1
        if n_obs:
            o_thr, o_steer, self.progress = pursuit_controls(
                self.states[1:], self.scene, self.obstacle_params, self.cfg.obstacle_lookahead,
                self.cfg.obstacle_speed_scale, self.cfg.obstacle_kp, progress_hint=self.progress)
            new[1:] = step_arrays(self.states[1:], o_thr, o_steer, self.obstacle_params)
        self.states = new
        self.prev_a_delta = a_curr
        self.steps += 1

        term = Termination.RUNNING
        if n_obs and self._ego_collides():
            term = Termination.COLLISION
        elif self.cfg.offtrack_terminal and not points_on_track(new[:1, :2], self.scene)[0]:
            term = Termination.OFF_TRACK
        elif self.steps >= self.cfg.episode_cap:
            term = Termination.TIME_LIMIT
        self.done = term is not Termination.RUNNING

        if self.log is not None:
            self._record(throttle, steer, reward, term, o_thr if n_obs else None, o_steer if n_obs else None)
        return Transition(self.observe(), raw, (throttle, steer), reward, term, prev)

    def _ego_collides(self) -> bool:
        ego, others = self.states[:1], self.states[1:]
        reach = 2.0 * np.hypot(self.fp.half_length, self.fp.half_width)
        near = np.hypot(others[:, 0] - ego[0, 0], others[:, 1] - ego[0, 1]) <= reach
        if not np.any(near):
            return False
        return bool(np.any(collisions(ego, self.fp, others[near], self.fp)))

    def _record(self, throttle, steer, reward, term, o_thr, o_steer):
        for i, row in enumerate(self.states):
            if i == 0:
                thr, st, r = throttle, steer, reward
            else:
                thr, st, r = float(o_thr[i - 1]), float(o_steer[i - 1]), 0.0
            self.log.append((self.steps, i, *(float(c) for c in row[:4]), thr, st, r, term.value))


TRAJECTORY_COLUMNS = ("step", "agent_id", "x", "y", "yaw", "v", "throttle", "steer", "reward", "termination")


def write_trajectory_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        w.writerows(rows)

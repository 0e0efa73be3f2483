"""Scripted racing-line followers for the obstacle cars and episode spawning.

The followers are curvature-aware pure-pursuit controllers. They do not react
to the ego car. Steering sign convention: positive steer turns left
(counter-clockwise yaw rate).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dynamics import VehicleParams, VehicleState, wrap_angle
from .world import Footprint, SceneGeometry, collisions


class ConfigurationError(ValueError):
    pass


class HeadingMode(enum.Enum):
    DEFAULT = "default"
    REVERSED = "reversed"

    @classmethod
    def parse(cls, value) -> "HeadingMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass
class ObstacleController:
    lookahead: float = 1.2
    target_speed_scale: float = 0.8
    centerline_progress: float = 0.0
    kp: float = 2.0

    def __post_init__(self):
        if self.lookahead <= 0:
            raise ValueError("lookahead must be positive")
        if not 0 < self.target_speed_scale <= 1:
            raise ValueError("target_speed_scale must be in (0, 1]")


def pursuit_controls(states: np.ndarray, scene: SceneGeometry, params: VehicleParams,
                     lookahead, speed_scale, kp, progress_hint=None):
    """Batched pure pursuit. Returns ``(throttle, steer, progress)`` arrays.

    ``progress_hint`` holds the previous arclength of each car and narrows the
    closest-point search; leave it ``None`` for a global search.
    """
    if scene.track_centerline is None:
        raise ConfigurationError(f"scene {scene.name!r} has no track centerline")
    states = np.atleast_2d(states)
    s = np.atleast_1d(scene.project(states[:, :2], hint=progress_hint))
    tx, ty, _, kappa = scene.centerline_at(s + lookahead)
    dx, dy = tx - states[:, 0], ty - states[:, 1]
    c, sn = np.cos(states[:, 2]), np.sin(states[:, 2])
    lx = c * dx + sn * dy
    ly = -sn * dx + c * dy
    ld = np.maximum(np.hypot(lx, ly), 1e-9)
    alpha = np.arctan2(ly, lx)
    steer = np.arctan(2.0 * params.wheelbase * np.sin(alpha) / ld)
    steer = np.clip(steer, params.delta_min, params.delta_max)

    with np.errstate(divide="ignore"):
        v_corner = np.sqrt(params.mu_g / np.maximum(np.abs(kappa), 1e-12))
    v_target = np.minimum(params.max_speed * speed_scale, v_corner)
    hold = (params.c_d * v_target ** 2 + params.c_r) / params.c_m
    throttle = np.clip(hold + kp * (v_target - states[:, 3]), 0.0, 1.0)
    return throttle, steer, s


def obstacle_control(ctrl: ObstacleController, state: VehicleState, scene: SceneGeometry,
                     params: VehicleParams = VehicleParams()):
    """Throttle and steering for one follower; updates ``ctrl.centerline_progress``."""
    thr, steer, s = pursuit_controls(state.as_array()[None, :], scene, params,
                                     ctrl.lookahead, ctrl.target_speed_scale, ctrl.kp)
    ctrl.centerline_progress = float(s[0])
    return float(thr[0]), float(steer[0])


def ego_params(obstacle_params: VehicleParams, speed_advantage: float = 1.5) -> VehicleParams:
    return obstacle_params.with_max_speed(speed_advantage * obstacle_params.max_speed)


def spawn_training_scene(mode, n_obstacles: int, scene: SceneGeometry, rng_seed: int,
                         footprint: Footprint = Footprint(), params: VehicleParams = VehicleParams(),
                         controller: ObstacleController | None = None, jitter: float = 0.1,
                         clearance: float = 0.3):
    """Place the ego and ``n_obstacles`` followers on the track.

    Returns a list of ``(VehicleState, controller)`` pairs; the first entry is
    the ego (controller ``None``). The ego takes a seeded spawn pose and the
    obstacles fill evenly spaced centreline slots after it, each shifted by a
    uniform jitter of ``+-jitter`` slot spacings. The ego pose does not depend
    on ``mode`` except for its heading.
    """
    mode = HeadingMode.parse(mode)
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be non-negative")
    if not scene.spawn_poses:
        raise ConfigurationError(f"scene {scene.name!r} has no spawn poses")
    rng = np.random.default_rng(rng_seed)
    names = sorted(scene.spawn_poses)
    ex, ey, eyaw = scene.spawn_poses[names[rng.integers(len(names))]]
    if mode is HeadingMode.REVERSED:
        eyaw = wrap_angle(eyaw + np.pi)
    out = [(VehicleState(ex, ey, eyaw, 0.0, 0.0), None)]
    if n_obstacles == 0:
        return out
    if scene.track_centerline is None:
        raise ConfigurationError(f"scene {scene.name!r} has no track centerline")

    spacing = scene.track_length / (n_obstacles + 1)
    min_gap = 2.0 * np.hypot(footprint.half_length, footprint.half_width) + clearance
    if spacing * (1.0 - 2.0 * jitter) < min_gap:
        max_n = int(scene.track_length * (1.0 - 2.0 * jitter) / min_gap) - 1
        raise ConfigurationError(f"{n_obstacles} obstacles do not fit on the track (max {max_n})")

    template = controller or ObstacleController()
    s_ego = scene.project(np.array([ex, ey]))
    offsets = rng.uniform(-jitter, jitter, n_obstacles)
    s = s_ego + (np.arange(1, n_obstacles + 1) + offsets) * spacing
    x, y, yaw, kappa = scene.centerline_at(s)
    v0 = np.minimum(params.max_speed * template.target_speed_scale,
                    np.sqrt(params.mu_g / np.maximum(np.abs(kappa), 1e-12)))
    for i in range(n_obstacles):
        ctrl = ObstacleController(template.lookahead, template.target_speed_scale,
                                  float(np.mod(s[i], scene.track_length)), template.kp)
        out.append((VehicleState(float(x[i]), float(y[i]), float(yaw[i]), float(v0[i]), 0.0), ctrl))

    poses = np.array([st.as_array() for st, _ in out])
    ii, jj = np.triu_indices(len(poses), 1)
    if np.any(collisions(poses[ii], footprint, poses[jj], footprint)):
        raise ConfigurationError("spawned footprints overlap")
    return out

"""Planar single-track vehicle model.

Longitudinal force balance ``c_m*T - c_d*v**2 - c_r*sign(v)`` drives the speed,
the heading follows the kinematic bicycle relation, and steering is
saturated so that lateral acceleration stays inside a friction circle of
radius ``mu_g``. Integration is semi-implicit Euler: speed and heading are
updated first and the position uses the updated values.

Everything runs on numpy arrays so the environment can advance all cars in
one call; the scalar helpers below route through the same code path, which
keeps single-car and batched results bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class NumericalDomainError(ValueError):
    """Raised when a state or control contains NaN/inf."""


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.32     # m
    mass: float = 3.0           # kg
    max_speed: float = 5.0      # m/s
    delta_min: float = -0.36    # rad
    delta_max: float = 0.36     # rad
    c_m: float = 6.9            # N per unit throttle
    c_d: float = 0.1            # N s^2 / m^2
    c_r: float = 0.5            # N
    mu_g: float = 8.0           # m/s^2, lateral acceleration cap
    dt: float = 0.02            # s

    def __post_init__(self):
        if self.wheelbase <= 0 or self.mass <= 0 or self.dt <= 0:
            raise ValueError("wheelbase, mass and dt must be positive")
        if not self.delta_min < 0 < self.delta_max:
            raise ValueError("steering range must satisfy delta_min < 0 < delta_max")
        if self.max_speed <= 0 or self.mu_g <= 0:
            raise ValueError("max_speed and mu_g must be positive")

    def with_max_speed(self, max_speed: float) -> "VehicleParams":
        return replace(self, max_speed=float(max_speed))


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v: float = 0.0
    steer: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw, self.v, self.steer], dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "VehicleState":
        return cls(*(float(c) for c in row[:5]))


def wrap_angle(theta):
    """Wrap to the half-open interval (-pi, pi]. Works on scalars and arrays."""
    theta = np.asarray(theta, dtype=np.float64)
    # values already in range pass through untouched so the round trip is exact
    out = np.where((theta > -np.pi) & (theta <= np.pi), theta, np.pi - np.mod(np.pi - theta, 2.0 * np.pi))
    if np.ndim(out) == 0:
        return float(out)
    return out


def terminal_speed(params: VehicleParams, throttle: float = 1.0) -> float:
    """Positive root of ``c_m*T - c_d*v**2 - c_r = 0`` (ignores the max_speed clamp)."""
    drive = params.c_m * throttle - params.c_r
    if drive <= 0:
        return 0.0
    return float(np.sqrt(drive / params.c_d))


def saturate_steer(v, steer, params: VehicleParams):
    """Reduce |steer| so that ``v**2 * tan(steer) / wheelbase <= mu_g``."""
    v = np.asarray(v, dtype=np.float64)
    steer = np.asarray(steer, dtype=np.float64)
    v2 = v * v
    with np.errstate(divide="ignore"):
        limit = np.where(v2 > 0.0, np.arctan(params.mu_g * params.wheelbase / np.where(v2 > 0, v2, 1.0)), np.inf)
    return np.sign(steer) * np.minimum(np.abs(steer), limit)


def step_arrays(states: np.ndarray, throttle, steer_cmd, params: VehicleParams) -> np.ndarray:
    """Advance an ``(n, 5)`` array of ``[x, y, yaw, v, steer]`` rows by one ``dt``."""
    states = np.asarray(states, dtype=np.float64)
    throttle = np.asarray(throttle, dtype=np.float64)
    steer_cmd = np.asarray(steer_cmd, dtype=np.float64)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(throttle)) and np.all(np.isfinite(steer_cmd))):
        raise NumericalDomainError("non-finite vehicle state or control")

    throttle = np.clip(throttle, 0.0, 1.0)
    steer_cmd = np.clip(steer_cmd, params.delta_min, params.delta_max)
    x, y, yaw, v = states[:, 0], states[:, 1], states[:, 2], states[:, 3]

    moving = v > 0.0
    drive = params.c_m * throttle
    force = np.where(moving, drive - params.c_d * v * v - params.c_r, np.maximum(drive - params.c_r, 0.0))
    v_new = np.clip(v + params.dt * force / params.mass, 0.0, params.max_speed)

    steer_eff = saturate_steer(v_new, steer_cmd, params)
    yaw_new = wrap_angle(yaw + params.dt * v_new / params.wheelbase * np.tan(steer_eff))
    x_new = x + params.dt * v_new * np.cos(yaw_new)
    y_new = y + params.dt * v_new * np.sin(yaw_new)
    return np.stack([x_new, y_new, np.atleast_1d(yaw_new), v_new, steer_eff], axis=1)


def step_dynamics(state: VehicleState, throttle: float, steer_cmd: float, params: VehicleParams) -> VehicleState:
    row = step_arrays(state.as_array()[None, :], [throttle], [steer_cmd], params)[0]
    return VehicleState.from_array(row)

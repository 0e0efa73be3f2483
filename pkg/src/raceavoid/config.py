"""Run configuration: YAML file plus command-line overrides.

Every section maps onto one of the library's dataclasses; unknown keys and
invalid values are all collected and reported together. See
``configs/default.yaml`` in the repository for the full schema.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .agents import HeadingMode
from .dynamics import VehicleParams
from .env import EnvConfig
from .evalbench import Direction
from .mpc import ApfCost, MpcConfig
from .ppo import PpoConfig
from .world import BUNDLED_SCENES, Footprint


class ConfigError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class ScenarioConfig:
    directions: list = field(default_factory=lambda: [d.slug for d in Direction])
    obstacle_speed: float = 1.0
    ego_speed: float = 1.0
    trials: int = 10
    offset_jitter: float = 0.2
    delay_jitter: float = 0.2
    timeout: float = 15.0


@dataclass
class BenchConfig:
    policy_reps: int = 10_000
    mpc_reps: int = 1_000


@dataclass
class EnvSection:
    n_obstacles: int = 15
    speed_advantage: float = 1.5
    episode_cap: int = 5000
    max_range: float = 10.0
    offtrack_terminal: bool = True
    obstacle_lookahead: float = 1.2
    obstacle_speed_scale: float = 0.8
    obstacle_kp: float = 2.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    scene: str = "racetrack"
    eval_scene: str = "intersection"
    mode: str = "default"
    workers: int = 1
    processes: bool = False
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    footprint: Footprint = field(default_factory=Footprint)
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(total_steps=2_000_000, checkpoint_interval=250_000))
    apf: ApfCost = field(default_factory=ApfCost)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def env_config(self) -> EnvConfig:
        e = self.env
        return EnvConfig(scene=self.scene, n_obstacles=e.n_obstacles, mode=self.mode,
                         speed_advantage=e.speed_advantage, episode_cap=e.episode_cap, max_range=e.max_range,
                         offtrack_terminal=e.offtrack_terminal, obstacle_lookahead=e.obstacle_lookahead,
                         obstacle_speed_scale=e.obstacle_speed_scale, obstacle_kp=e.obstacle_kp,
                         vehicle=self.vehicle, footprint=self.footprint)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_SECTIONS = {"vehicle": VehicleParams, "footprint": Footprint, "env": EnvSection, "ppo": PpoConfig,
             "apf": ApfCost, "mpc": MpcConfig, "scenario": ScenarioConfig, "bench": BenchConfig}


def _coerce(value, default, where, problems):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
        if isinstance(value, str):
            return [v.strip() for v in value.split(",") if v.strip()]
    else:
        return value
    problems.append(f"{where}: expected {type(default).__name__}, got {value!r}")
    return default


def _build_section(cls, default, data, name, problems):
    if data is None:
        return default
    if not isinstance(data, dict):
        problems.append(f"{name}: expected a mapping, got {type(data).__name__}")
        return default
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
    kwargs = {k: _coerce(v, getattr(default, k), f"{name}.{k}", problems) for k, v in data.items() if k in known}
    try:
        return replace(default, **kwargs)
    except (ValueError, TypeError) as exc:
        problems.append(f"{name}: {exc}")
        return default


def _scene_problem(value: str, key: str, base: Path | None):
    if value in BUNDLED_SCENES:
        return None
    p = Path(value)
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.exists():
        return f"{key}: scene file not found: {p}"
    return None


def build_config(data: dict | None, overrides: dict | None = None, base_dir=None) -> RunConfig:
    """Merge ``data`` (parsed YAML) and ``overrides`` over the defaults; raise :class:`ConfigError`."""
    data = dict(data or {})
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        section, _, key = k.partition(".")
        if key:
            data.setdefault(section, {})
            if isinstance(data[section], dict):
                data[section][key] = v
        else:
            data[k] = v
    problems = []
    cfg = RunConfig()
    for key, value in data.items():
        if key in _SECTIONS:
            setattr(cfg, key, _build_section(_SECTIONS[key], getattr(cfg, key), value, key, problems))
        elif key in ("seed", "out", "scene", "eval_scene", "mode", "workers", "processes"):
            if value is None and key == "seed":
                problems.append("seed: required (there is no wall-clock default)")
                continue
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key, problems))
        else:
            problems.append(f"{key}: unknown key")

    base = Path(base_dir) if base_dir is not None else None
    for key in ("scene", "eval_scene"):
        msg = _scene_problem(getattr(cfg, key), key, base)
        if msg:
            problems.append(msg)
        elif base is not None and getattr(cfg, key) not in BUNDLED_SCENES and not Path(getattr(cfg, key)).is_absolute():
            setattr(cfg, key, str(base / getattr(cfg, key)))
    try:
        cfg.mode = HeadingMode.parse(cfg.mode).value
    except Exception as exc:  # noqa: BLE001
        problems.append(f"mode: {exc}")
    for d in cfg.scenario.directions:
        try:
            Direction.parse(d)
        except ValueError as exc:
            problems.append(f"scenario.directions: {exc}")
    if cfg.workers < 1:
        problems.append("workers: must be at least 1")
    if cfg.seed < 0:
        problems.append("seed: must be non-negative")
    if cfg.scenario.trials < 1:
        problems.append("scenario.trials: must be at least 1")
    if cfg.scenario.obstacle_speed < 0:
        problems.append("scenario.obstacle_speed: must be non-negative")
    if cfg.bench.policy_reps < 1 or cfg.bench.mpc_reps < 1:
        problems.append("bench: repetitions must be positive")
    if cfg.ppo.total_steps < 0:
        problems.append("ppo.total_steps: must be non-negative")
    if cfg.ppo.checkpoint_interval < 1:
        problems.append("ppo.checkpoint_interval: must be positive")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data, base = {}, None
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file not found: {p}"])
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{p}: not valid YAML ({exc})"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"{p}: top level must be a mapping"])
        base = p.parent
    return build_config(data, overrides, base)

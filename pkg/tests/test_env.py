import itertools

import numpy as np
import pytest

from raceavoid.dynamics import VehicleParams, VehicleState
from raceavoid.env import (EnvConfig, EpisodeFinishedError, RacingEnv, RawAction, Termination, compute_reward,
                           normalized_steer, scale_action, write_trajectory_csv)
from raceavoid.policy import init_policy
from raceavoid.ppo import Collector
from raceavoid.world import cast_rays, load_scene

P = VehicleParams()


def test_scale_action_examples():
    assert scale_action(RawAction(-0.5, 0.0), P)[0] == 0.0
    assert scale_action(RawAction(2.0, 0.0), P)[0] == 1.0
    assert scale_action(RawAction(0.3, 0.0), P) == (0.3, 0.0)
    assert scale_action(RawAction(1.0, 1.0), P)[1] == pytest.approx(P.delta_max)
    assert scale_action(RawAction(1.0, -7.0), P)[1] == pytest.approx(P.delta_min)


def test_raw_action_must_be_finite():
    with pytest.raises(ValueError):
        RawAction(np.nan, 0.0)


@pytest.mark.parametrize("t,r", [(0.0, 0.0), (0.5, 1.25), (1.0, 5.0)])
def test_reward_throttle_term(t, r):
    assert compute_reward(t, 0.0, 0.0) == pytest.approx(r, abs=1e-15)


def test_reward_reversal_grid():
    grid = [-1.0, -0.5, 0.0, 0.5, 1.0]
    for prev, curr in itertools.product(grid, grid):
        reward = compute_reward(0.7, prev, curr)
        if {prev, curr} == {-1.0, 1.0}:
            assert reward == -2.0
        else:
            assert reward == pytest.approx(5 * 0.49)


def test_reward_range_random():
    rng = np.random.default_rng(0)
    raw = rng.uniform(-3, 3, size=(100_000, 3))
    for a_t, prev, curr in raw:
        thr, _ = scale_action(RawAction(a_t, curr), P)
        r = compute_reward(thr, normalized_steer(prev), normalized_steer(curr))
        sat = normalized_steer(prev) * normalized_steer(curr) <= -1 + 1e-6
        assert (r == -2.0) == sat
        assert r == -2.0 or 0.0 <= r <= 5.0


def open_env(**kw):
    cfg = EnvConfig(n_obstacles=0, **kw)
    return RacingEnv(cfg)


def test_open_track_full_throttle_running():
    env = open_env()
    env.reset(0)
    tr = env.step(RawAction(1.0, 0.0))
    assert tr.termination is Termination.RUNNING and tr.reward == 5.0
    assert tr.prev_a_delta == 0.0


def test_overlap_gives_collision():
    env = RacingEnv(EnvConfig(n_obstacles=1))
    env.reset(0)
    ego = env.ego
    env.place(ego, [ego])
    tr = env.step(RawAction(0.0, 0.0))
    assert tr.termination is Termination.COLLISION and tr.terminal and not tr.truncated


def test_off_track_terminal_and_configurable():
    env = open_env()
    env.place(VehicleState(1000.0, 0.0, 0.0, 1.0))
    tr = env.step(RawAction(0.0, 0.0))
    assert tr.termination is Termination.OFF_TRACK and tr.terminal
    env = open_env(offtrack_terminal=False)
    env.place(VehicleState(1000.0, 0.0, 0.0, 1.0))
    assert env.step(RawAction(0.0, 0.0)).termination is Termination.RUNNING


def test_time_limit_truncates():
    env = open_env(episode_cap=5)
    env.reset(0)
    for _ in range(4):
        assert env.step(RawAction(0.0, 0.0)).termination is Termination.RUNNING
    tr = env.step(RawAction(0.0, 0.0))
    assert tr.termination is Termination.TIME_LIMIT and tr.truncated and not tr.terminal
    with pytest.raises(EpisodeFinishedError):
        env.step(RawAction(0.0, 0.0))


def test_reset_determinism_and_modes():
    env = RacingEnv(EnvConfig(n_obstacles=4))
    a = env.reset(5)
    b = env.reset(5)
    assert np.array_equal(a, b)
    yaw_d = env.reset(5, mode="default") is not None and env.ego.yaw
    env.reset(5, mode="reversed")
    diff = np.mod(env.ego.yaw - yaw_d, 2 * np.pi)
    assert diff == pytest.approx(np.pi, abs=1e-9)


def test_reset_without_obstacles_matches_static_scan():
    env = open_env()
    obs = env.reset(3)
    assert np.array_equal(obs, cast_rays(env.ego, load_scene("racetrack")))


def test_reversal_penalty_through_env():
    env = open_env()
    env.reset(0)
    assert env.step(RawAction(1.0, -1.0)).reward == 5.0     # prev is 0 after reset
    assert env.step(RawAction(1.0, 3.0)).reward == -2.0     # clamps to +1


def test_env_determinism_and_reward_bounds():
    actions = np.random.default_rng(4).uniform(-1.5, 1.5, size=(600, 2))

    def run():
        env = RacingEnv(EnvConfig(n_obstacles=4))
        env.reset(9)
        out = []
        for a in actions:
            tr = env.step(RawAction(*a))
            out.append((tr.observation.tobytes(), tr.reward, tr.termination))
            assert tr.reward == -2.0 or 0.0 <= tr.reward <= 5.0
            assert tr.observation.shape == (170,)
            if tr.termination is not Termination.RUNNING:
                env.reset(len(out))
        return out
    assert run() == run()


def test_terminal_steps_bootstrap_zero_in_buffer():
    col = Collector(EnvConfig(n_obstacles=4), seed=0)
    buf, finished = col.collect(init_policy(0), 1024, 0.99, 0.95)
    assert any(f[2] in ("collision", "off_track") for f in finished)
    assert np.any(buf.terminal)
    assert np.all(buf.next_values[buf.terminal] == 0.0)
    last = np.flatnonzero(buf.terminal)
    # with zero bootstrap the advantage at a terminal step is r - V
    assert np.allclose(buf.advantages[last], buf.rewards[last] - buf.values[last], atol=1e-12)


def test_trajectory_log(tmp_path):
    env = RacingEnv(EnvConfig(n_obstacles=2))
    env.enable_logging()
    env.reset(1)
    env.step(RawAction(1.0, 0.0))
    assert len(env.log) == 3
    write_trajectory_csv(env.log, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,agent_id,x,y,yaw,v,throttle,steer,reward,termination"
    assert len(lines) == 4

import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raceavoid.env import EnvConfig
from raceavoid.policy import forward, gaussian_log_prob, init_policy, load_checkpoint
from raceavoid.ppo import (Adam, PpoConfig, RolloutBuffer, TrainConfig, compute_gae, list_checkpoints, normalize,
                           ppo_loss_and_grad, ppo_update, train)


def brute_gae(r, v, term, trunc, bootstrap, gamma, lam, trunc_values):
    """lambda-weighted average of k-step advantages, each summed explicitly."""
    n = len(r)
    out = np.zeros(n)
    for t in range(n):
        end = t                                  # last index of this episode inside the segment
        while end < n - 1 and not (term[end] or trunc[end]):
            end += 1
        if term[end]:
            tail = 0.0
        elif trunc[end]:
            tail = trunc_values[end]
        else:
            tail = bootstrap
        horizon = end - t + 1

        def value_after(k):                      # V(s_{t+k})
            return tail if t + k == end + 1 else v[t + k]

        def k_step(k):
            return sum(gamma ** i * r[t + i] for i in range(k)) + gamma ** k * value_after(k) - v[t]
        est = sum((1 - lam) * lam ** (k - 1) * k_step(k) for k in range(1, horizon))
        out[t] = est + lam ** (horizon - 1) * k_step(horizon)
    return out


def random_sequence(rng, n):
    r = rng.normal(size=n) * 3
    v = rng.normal(size=n)
    kind = rng.choice(3, size=n, p=[0.8, 0.1, 0.1])
    return r, v, kind == 1, kind == 2, rng.normal(size=n), float(rng.normal())


def test_gae_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        r, v, term, trunc, tv, boot = random_sequence(rng, n)
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, ret = compute_gae(r, v, term, trunc, boot, gamma, lam, tv)
        assert np.max(np.abs(adv - brute_gae(r, v, term, trunc, boot, gamma, lam, tv))) < 1e-10
        assert np.allclose(ret, adv + v, atol=0)


def test_gae_truncation_without_values_uses_bootstrap():
    r, v = np.array([1.0, 2.0]), np.array([0.5, 0.25])
    adv, _ = compute_gae(r, v, [False, False], [True, False], 3.0, 0.9, 0.8)
    assert adv[0] == pytest.approx(1.0 + 0.9 * 3.0 - 0.5)


def test_gae_examples():
    adv, _ = compute_gae([5.0], [3.0], [True], [False], 100.0, 0.99, 0.95)
    assert adv[0] == pytest.approx(2.0)
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=10), rng.normal(size=10)
    adv, _ = compute_gae(r, v, np.zeros(10, bool), np.zeros(10, bool), 1.7, 1.0, 1.0)
    expected = np.array([r[t:].sum() + 1.7 - v[t] for t in range(10)])
    assert np.allclose(adv, expected, atol=1e-12)


def test_gae_errors():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [1.0], [False], [False], 0.0, 0.9, 0.9)
    with pytest.raises(ValueError):
        compute_gae([1.0], [1.0], [True], [True], 0.0, 0.9, 0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PpoConfig(minibatch=100)
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0.0)


@settings(max_examples=50)
@given(st.integers(2, 256), st.integers(0, 2**31 - 1))
def test_advantage_normalization(n, seed):
    a = np.random.default_rng(seed).normal(3.0, 50.0, n)
    z = normalize(a)
    assert abs(z.mean()) < 1e-6
    assert abs(z.std() - 1.0) < 1e-6


# loss gradients -------------------------------------------------------------

SMALL = dict(actor_dims=(6, 4, 4, 2), critic_dims=(6, 4, 4, 1), dtype=np.float64)


def small_batch(rng, p, b=16):
    """Ratios scattered around 1 so both clipped and unclipped samples occur with an O(1) loss."""
    while True:
        obs = rng.normal(size=(b, 6))
        mean = forward(p.actor, obs)
        actions = mean + rng.normal(size=(b, 2)) * np.exp(p.log_std)
        old = gaussian_log_prob(actions, mean, p.log_std) + rng.normal(scale=0.3, size=b)
        ratio = np.exp(gaussian_log_prob(actions, mean, p.log_std) - old)
        if np.all(np.abs(np.abs(ratio - 1.0) - 0.2) > 1e-3):    # keep clear of the clip kink
            return obs, actions, old, rng.normal(size=b), rng.normal(size=b)


def flat(p):
    return np.concatenate([a.ravel() for a in p.arrays()])


def set_flat(p, x):
    i = 0
    for a in p.arrays():
        a[...] = x[i:i + a.size].reshape(a.shape)
        i += a.size


def test_full_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(50):
        p = init_policy(trial, **SMALL)
        for w in p.actor.weights[-1:]:
            w *= 50.0               # give the policy head a non-trivial scale
        p.log_std[:] = rng.normal(scale=0.3, size=2)
        cfg = PpoConfig(entropy_coeff=0.01 * (trial % 2))
        batch = small_batch(rng, p)
        _, grads, _ = ppo_loss_and_grad(p, *batch, cfg)
        analytic = np.concatenate([g.ravel() for g in grads])
        x0 = flat(p)
        numeric = np.zeros_like(x0)
        h = 1e-5
        for i in range(x0.size):
            for sgn in (1, -1):
                x = x0.copy()
                x[i] += sgn * h
                set_flat(p, x)
                numeric[i] += sgn * ppo_loss_and_grad(p, *batch, cfg)[0]
        numeric /= 2 * h
        set_flat(p, x0)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, rel.max())
    assert worst < 1e-4


def test_clipped_samples_have_zero_surrogate_gradient():
    rng = np.random.default_rng(2)
    p = init_policy(0, **SMALL)
    cfg = PpoConfig()
    obs = rng.normal(size=(2, 6))
    from raceavoid.policy import forward
    mean = forward(p.actor, obs)
    actions = mean + 0.1
    logp = gaussian_log_prob(actions, mean, p.log_std)
    # ratio 1.5 with positive advantage, ratio 0.5 with negative advantage: both clipped
    old = logp - np.log([1.5, 0.5])
    adv = np.array([1.0, -1.0])
    _, grads, stats = ppo_loss_and_grad(p, obs, actions, old, adv, forward(p.critic, obs)[:, 0], cfg)
    n_actor = 2 * len(p.actor.weights)
    for g in grads[:n_actor] + [grads[-1]]:
        assert np.all(g == 0.0)
    assert stats["clip_fraction"] == 1.0


def test_ratio_one_gives_policy_gradient():
    rng = np.random.default_rng(3)
    p = init_policy(1, **SMALL)
    from raceavoid.policy import forward
    obs = rng.normal(size=(1, 6))
    mean = forward(p.actor, obs)
    action = mean + np.array([[0.3, -0.2]])
    old = gaussian_log_prob(action, mean, p.log_std)
    A = 1.7
    _, grads, _ = ppo_loss_and_grad(p, obs, action, old, np.array([A]), forward(p.critic, obs)[:, 0],
                                    PpoConfig())
    # d(-A logpi)/d log_std = -A (z^2 - 1) with sigma = 1
    z = action - mean
    assert np.allclose(grads[-1], -A * (z[0] ** 2 - 1.0))


def _buffer(rng, n=128, obs_dim=6):
    buf = RolloutBuffer(n, obs_dim=obs_dim)
    for _ in range(n):
        buf.add(rng.normal(size=obs_dim), rng.normal(size=2), -1.0, rng.normal(), rng.normal())
    buf.finish_segment(0.0, 0.99, 0.95)
    return buf


def test_zero_advantages_leave_actor_unchanged():
    rng = np.random.default_rng(4)
    p = init_policy(0, **SMALL)
    before = [a.copy() for a in p.arrays()]
    buf = _buffer(rng)
    buf.advantages[:] = 0.0
    cfg = PpoConfig(rollout_size=128, minibatch=32, epochs=2, normalize_advantages=False)
    ppo_update(p, buf, cfg, Adam(p.arrays()), np.random.default_rng(0))
    n_actor = 2 * len(p.actor.weights)
    for a, b in zip(p.arrays()[:n_actor] + [p.log_std], before[:n_actor] + [before[-1]]):
        assert np.array_equal(a, b)
    assert not np.array_equal(p.critic.weights[0], before[n_actor])


def test_update_requires_full_buffer_and_finite_loss():
    p = init_policy(0, **SMALL)
    buf = RolloutBuffer(64, obs_dim=6)
    with pytest.raises(ValueError):
        ppo_update(p, buf, PpoConfig(rollout_size=64), Adam(p.arrays()), np.random.default_rng(0))
    buf = _buffer(np.random.default_rng(0), n=64)
    buf.returns[3] = np.nan
    with pytest.raises(FloatingPointError, match="minibatch"):
        ppo_update(p, buf, PpoConfig(rollout_size=64), Adam(p.arrays()), np.random.default_rng(0))


# training driver --------------------------------------------------------------

def small_train_cfg(total=4096):
    return TrainConfig(ppo=PpoConfig(total_steps=total, checkpoint_interval=2048, epochs=1),
                       env=EnvConfig(n_obstacles=2, mode="reversed"))


def test_train_two_updates_and_determinism(tmp_path):
    lines = []
    a = train(small_train_cfg(), tmp_path / "a", seed=3, progress=lines.append)
    b = train(small_train_cfg(), tmp_path / "b", seed=3, progress=lambda s: None)
    assert len(lines) == 2
    assert [x.name for x in a] == ["ckpt_000000000000.kevd", "ckpt_000000002048.kevd", "ckpt_000000004096.kevd"]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "curve.csv")))
    assert [int(r["step"]) for r in rows] == [2048, 4096]
    assert [path for _, path in list_checkpoints(tmp_path / "a")] == a


def test_train_worker_count_is_deterministic(tmp_path):
    cfg = small_train_cfg(2048)
    cfg.workers = 2
    a = train(cfg, tmp_path / "a", seed=1, progress=lambda s: None)
    b = train(cfg, tmp_path / "b", seed=1, progress=lambda s: None)
    assert a[-1].read_bytes() == b[-1].read_bytes()


def test_resume_continues_from_checkpoint(tmp_path):
    ck = train(small_train_cfg(2048), tmp_path, seed=0, progress=lambda s: None)
    more = train(small_train_cfg(4096), tmp_path, seed=0, resume=ck[-1], progress=lambda s: None)
    assert [c.name for c in more] == ["ckpt_000000004096.kevd"]
    p, opt = load_checkpoint(more[-1])
    assert opt.step == 2 * 2048 // 64
    rows = list(csv.DictReader(open(tmp_path / "curve.csv")))
    assert [int(r["step"]) for r in rows] == [2048, 4096]

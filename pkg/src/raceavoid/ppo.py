"""Proximal Policy Optimization with hand-written gradients.

The learner is numpy only: forward/backward passes come from
:mod:`raceavoid.policy`, advantages from :func:`compute_gae`, and the
parameters are updated with Adam. Episodes that end in a collision or off the
track bootstrap a zero value; episodes cut by the step cap bootstrap the
critic's estimate of the final observation.
"""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import re
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import HeadingMode
from .env import EnvConfig, RacingEnv, RawAction, Termination
from .policy import (AdamState, PolicyParams, backward, forward, forward_cached, gaussian_entropy,
                     gaussian_log_prob, init_policy, load_checkpoint, save_checkpoint, sample_action)
from .world import N_RAYS

log = logging.getLogger(__name__)

CKPT_PATTERN = re.compile(r"ckpt_(\d+)\.kevd$")


@dataclass
class PpoConfig:
    epochs: int = 10
    minibatch: int = 64
    rollout_size: int = 2048
    gamma: float = 0.99
    lr: float = 3e-4
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coeff: float = 0.5
    entropy_coeff: float = 0.0
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    adam_eps: float = 1e-8
    total_steps: int = 100_000_000
    checkpoint_interval: int = 5_000_000

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 < self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.rollout_size % self.minibatch:
            raise ValueError("minibatch must divide rollout_size")


# ---------------------------------------------------------------------------
# advantages


def compute_gae(rewards, values, terminal_flags, truncated_flags, bootstrap_value, gamma, lam,
                truncation_values=None):
    """Generalized advantage estimates and returns for one contiguous segment.

    ``bootstrap_value`` is the critic's value of the observation following the
    last step. At a truncated step the episode's final observation is valued
    by ``truncation_values[t]`` when given, otherwise by ``bootstrap_value``.
    Terminal steps contribute no future value.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    term = np.asarray(terminal_flags, dtype=bool)
    trunc = np.asarray(truncated_flags, dtype=bool)
    n = len(r)
    if not (len(v) == len(term) == len(trunc) == n):
        raise ValueError("rewards, values and flags must have equal length")
    if np.any(term & trunc):
        raise ValueError("a step cannot be both terminal and truncated")
    next_v = _next_values(v, term, trunc, bootstrap_value, truncation_values)
    delta = r + gamma * next_v - v
    carry = gamma * lam * (~term & ~trunc)
    adv = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = delta[t] + carry[t] * acc
        adv[t] = acc
    return adv, adv + v


def _next_values(v, term, trunc, bootstrap_value, truncation_values):
    nxt = np.append(v[1:], float(bootstrap_value))
    if truncation_values is None:
        nxt = np.where(trunc, float(bootstrap_value), nxt)
    else:
        nxt = np.where(trunc, np.asarray(truncation_values, dtype=np.float64), nxt)
    return np.where(term, 0.0, nxt)


class RolloutBuffer:
    """Fixed-capacity on-policy storage, filled by one or more segments."""

    def __init__(self, capacity: int = 2048, obs_dim: int = N_RAYS, act_dim: int = 2):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, act_dim))
        self.log_probs = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.truncation_values = np.zeros(capacity)
        self.advantages = np.zeros(capacity)
        self.returns = np.zeros(capacity)
        self.next_values = np.zeros(capacity)   # value actually bootstrapped at each step
        self.ptr = 0
        self._segment_start = 0

    @property
    def full(self) -> bool:
        return self.ptr == self.capacity

    def add(self, obs, action, log_prob, reward, value, terminal=False, truncated=False, truncation_value=0.0):
        if self.ptr >= self.capacity:
            raise IndexError("rollout buffer is full")
        i = self.ptr
        self.obs[i] = obs
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.terminal[i] = terminal
        self.truncated[i] = truncated
        self.truncation_values[i] = truncation_value
        self.ptr += 1

    def finish_segment(self, bootstrap_value: float, gamma: float, lam: float) -> None:
        """Compute advantages for the steps added since the previous call."""
        sl = slice(self._segment_start, self.ptr)
        args = (self.values[sl], self.terminal[sl], self.truncated[sl])
        self.advantages[sl], self.returns[sl] = compute_gae(
            self.rewards[sl], *args, bootstrap_value, gamma, lam, self.truncation_values[sl])
        self.next_values[sl] = _next_values(*args, bootstrap_value, self.truncation_values[sl])
        self._segment_start = self.ptr

    def extend(self, other: "RolloutBuffer") -> None:
        """Append a finished buffer (advantages included)."""
        n = other.ptr
        sl = slice(self.ptr, self.ptr + n)
        for name in ("obs", "actions", "log_probs", "rewards", "values", "terminal", "truncated",
                     "truncation_values", "advantages", "returns", "next_values"):
            getattr(self, name)[sl] = getattr(other, name)[:n]
        self.ptr += n
        self._segment_start = self.ptr


# ---------------------------------------------------------------------------
# loss and gradients


def normalize(adv, eps: float = 1e-8):
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_loss_and_grad(p: PolicyParams, obs, actions, old_log_probs, advantages, returns, cfg: PpoConfig):
    """Clipped-surrogate + value + entropy loss and its exact gradient.

    Returns ``(loss, grads, stats)`` with ``grads`` aligned to ``p.arrays()``.
    ``advantages`` are used as given (normalise beforehand if desired).
    """
    dtype = p.actor.weights[0].dtype
    obs = np.asarray(obs, dtype=dtype)
    actions = np.asarray(actions, dtype=dtype)
    adv = np.asarray(advantages, dtype=dtype)
    ret = np.asarray(returns, dtype=dtype)
    b = len(obs)

    mean, acts_a = forward_cached(p.actor, obs)
    log_std = p.log_std
    inv_var = np.exp(-2.0 * log_std)
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - np.asarray(old_log_probs, dtype=dtype))
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr1, surr2 = ratio * adv, clipped * adv
    unclipped = surr1 <= surr2
    policy_loss = -np.mean(np.minimum(surr1, surr2))

    value, acts_c = forward_cached(p.critic, obs)
    err = ret - value[:, 0]
    value_loss = cfg.value_coeff * np.mean(err * err)
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + value_loss - cfg.entropy_coeff * entropy

    d_logp = np.where(unclipped, -adv * ratio / b, 0.0)
    diff = actions - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) - cfg.entropy_coeff
    aw, ab = backward(p.actor, acts_a, d_mean)
    d_value = (-2.0 * cfg.value_coeff / b * err)[:, None]
    cw, cb = backward(p.critic, acts_c, d_value)

    grads = []
    for ws, bs in ((aw, ab), (cw, cb)):
        for w, bb in zip(ws, bs):
            grads += [w, bb]
    grads.append(np.asarray(d_log_std, dtype=dtype))

    log_ratio = logp - old_log_probs
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": entropy,
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    return float(loss), grads, stats


class Adam:
    def __init__(self, params: list, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 state: AdamState | None = None):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        if state is None:
            state = AdamState(0, [np.zeros_like(a) for a in params], [np.zeros_like(a) for a in params])
        self.state = state

    def step(self, grads) -> None:
        st = self.state
        st.step += 1
        c1 = 1.0 - self.b1 ** st.step
        c2 = 1.0 - self.b2 ** st.step
        for a, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(a.dtype)


def ppo_update(p: PolicyParams, buffer: RolloutBuffer, cfg: PpoConfig, optimizer: Adam,
               rng: np.random.Generator) -> dict:
    """Run ``cfg.epochs`` passes of shuffled minibatch Adam steps; mutates ``p`` in place."""
    if not buffer.full:
        raise ValueError(f"buffer holds {buffer.ptr} of {buffer.capacity} transitions")
    n = buffer.capacity
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            adv = buffer.advantages[idx]
            if cfg.normalize_advantages:
                adv = normalize(adv)
            loss, grads, stats = ppo_loss_and_grad(p, buffer.obs[idx], buffer.actions[idx],
                                                   buffer.log_probs[idx], adv, buffer.returns[idx], cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(
                    f"non-finite loss in epoch {epoch}, minibatch starting at {start}: {stats}")
            if cfg.max_grad_norm:
                norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
                if norm > cfg.max_grad_norm:
                    grads = [g * (cfg.max_grad_norm / norm) for g in grads]
            optimizer.step(grads)
            history.append(stats)
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]}


# ---------------------------------------------------------------------------
# rollout collection


def _episode_seed(seed: int, worker: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, worker, episode]).generate_state(1)[0])


class Collector:
    """One environment plus its action-noise stream; episodes continue across rollouts."""

    def __init__(self, env_cfg: EnvConfig, seed: int, worker: int = 0, start_step: int = 0):
        self.env = RacingEnv(env_cfg)
        self.seed, self.worker = seed, worker
        self.rng = np.random.default_rng([seed, worker, start_step, 1])
        self.episode = start_step * 1000
        self.obs = self.env.reset(_episode_seed(seed, worker, self.episode))
        self.ep_reward = 0.0
        self.ep_len = 0

    def collect(self, p: PolicyParams, n_steps: int, gamma: float, lam: float):
        buf = RolloutBuffer(n_steps)
        finished = []
        for _ in range(n_steps):
            action, logp = sample_action(p, self.obs, self.rng)
            value = float(forward(p.critic, self.obs)[0])
            tr = self.env.step(RawAction(float(action[0]), float(action[1])))
            self.ep_reward += tr.reward
            self.ep_len += 1
            trunc_value = float(forward(p.critic, tr.observation)[0]) if tr.truncated else 0.0
            buf.add(self.obs, action, logp, tr.reward, value, tr.terminal, tr.truncated, trunc_value)
            if tr.termination is Termination.RUNNING:
                self.obs = tr.observation
            else:
                finished.append((self.ep_reward, self.ep_len, tr.termination.value))
                self.episode += 1
                self.obs = self.env.reset(_episode_seed(self.seed, self.worker, self.episode))
                self.ep_reward, self.ep_len = 0.0, 0
        bootstrap = float(forward(p.critic, self.obs)[0])
        buf.finish_segment(bootstrap, gamma, lam)
        return buf, finished


def _worker_main(conn, env_cfg, seed, worker, start_step):
    col = Collector(env_cfg, seed, worker, start_step)
    while True:
        msg = conn.recv()
        if msg is None:
            break
        conn.send(col.collect(*msg))
    conn.close()


class RolloutPool:
    """``n`` collectors merged in worker order; optionally one process per collector."""

    def __init__(self, env_cfg: EnvConfig, seed: int, n: int = 1, processes: bool = False, start_step: int = 0):
        self.n = n
        self.procs = []
        if processes and n > 1:
            ctx = mp.get_context("spawn")
            self.conns = []
            for w in range(n):
                parent, child = ctx.Pipe()
                pr = ctx.Process(target=_worker_main, args=(child, env_cfg, seed, w, start_step), daemon=True)
                pr.start()
                self.conns.append(parent)
                self.procs.append(pr)
            self.collectors = None
        else:
            self.collectors = [Collector(env_cfg, seed, w, start_step) for w in range(n)]

    def collect(self, p: PolicyParams, n_steps: int, gamma: float, lam: float):
        if n_steps % self.n:
            raise ValueError("rollout size must be divisible by the worker count")
        per = n_steps // self.n
        if self.collectors is not None:
            parts = [c.collect(p, per, gamma, lam) for c in self.collectors]
        else:
            for c in self.conns:
                c.send((p, per, gamma, lam))
            parts = [c.recv() for c in self.conns]
        buf = RolloutBuffer(n_steps)
        finished = []
        for b, f in parts:
            buf.extend(b)
            finished += f
        return buf, finished

    def close(self):
        for c in self.conns if self.procs else []:
            c.send(None)
        for pr in self.procs:
            pr.join(timeout=5)


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainConfig:
    ppo: PpoConfig = field(default_factory=PpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    workers: int = 1
    processes: bool = False
    stats_window: int = 20


CURVE_COLUMNS = ("step", "mean_episode_reward", "mean_episode_length", "collision_rate", "episodes",
                 "policy_loss", "value_loss", "approx_kl", "clip_fraction", "log_std_mean")


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:012d}.kevd"


def list_checkpoints(out_dir) -> list:
    found = []
    for path in Path(out_dir).glob("ckpt_*.kevd"):
        m = CKPT_PATTERN.search(path.name)
        if m:
            found.append((int(m.group(1)), path))
    return sorted(found)


def train(cfg: TrainConfig, out_dir, seed: int, mode=None, resume=None, progress=print) -> list:
    """Alternate rollouts and PPO updates until ``cfg.ppo.total_steps``.

    Checkpoints land in ``out_dir`` every ``checkpoint_interval`` steps
    (including step 0 and the final step) and a training curve is appended to
    ``out_dir/curve.csv``. Returns the list of checkpoint paths written.
    ``resume`` may name a checkpoint file; its step is parsed from the name.
    """
    pc = cfg.ppo
    env_cfg = cfg.env if mode is None else replace(cfg.env, mode=HeadingMode.parse(mode).value)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    step = 0
    if resume is not None:
        params, opt_state = load_checkpoint(resume)
        m = CKPT_PATTERN.search(Path(resume).name)
        step = int(m.group(1)) if m else 0
    else:
        params, opt_state = init_policy(seed), None
    optimizer = Adam(params.arrays(), lr=pc.lr, eps=pc.adam_eps, state=opt_state)
    rng = np.random.default_rng([seed, 7, step])
    pool = RolloutPool(env_cfg, seed, cfg.workers, cfg.processes, start_step=step)

    curve_path = out / "curve.csv"
    new_curve = not curve_path.exists() or resume is None
    written = []
    if step == 0:
        path = checkpoint_path(out, 0)
        save_checkpoint(params, optimizer.state, path)
        written.append(path)

    recent = deque(maxlen=cfg.stats_window)
    next_ckpt = (step // pc.checkpoint_interval + 1) * pc.checkpoint_interval
    try:
        with open(curve_path, "w" if new_curve else "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_curve:
                writer.writerow(CURVE_COLUMNS)
            while step < pc.total_steps:
                buf, finished = pool.collect(params, pc.rollout_size, pc.gamma, pc.gae_lambda)
                stats = ppo_update(params, buf, pc, optimizer, rng)
                step += pc.rollout_size
                recent.extend(finished)
                crashes = sum(1 for f in finished if f[2] in ("collision", "off_track"))
                row = (
                    step,
                    float(np.mean([f[0] for f in recent])) if recent else float("nan"),
                    float(np.mean([f[1] for f in recent])) if recent else float("nan"),
                    crashes * 1e4 / pc.rollout_size,
                    len(finished),
                    stats["policy_loss"], stats["value_loss"], stats["approx_kl"], stats["clip_fraction"],
                    float(np.mean(params.log_std)),
                )
                writer.writerow(row)
                fh.flush()
                progress(f"step {step:>10d}  reward {row[1]:9.2f}  length {row[2]:8.1f}  "
                         f"crashes/1e4 {row[3]:6.1f}")
                if step >= next_ckpt or step >= pc.total_steps:
                    path = checkpoint_path(out, step)
                    save_checkpoint(params, optimizer.state, path)
                    written.append(path)
                    while next_ckpt <= step:
                        next_ckpt += pc.checkpoint_interval
    finally:
        pool.close()
    return written


def evaluate(p: PolicyParams, env_cfg: EnvConfig, episodes: int = 10, seed: int = 0,
             deterministic: bool = True) -> dict:
    """Mean episode reward/length of ``p`` on fresh seeded episodes."""
    env = RacingEnv(env_cfg)
    rng = np.random.default_rng([seed, 99])
    rewards, lengths, ends = [], [], []
    for k in range(episodes):
        obs = env.reset(_episode_seed(seed, 10_000, k))
        total = 0.0
        while True:
            if deterministic:
                a = forward(p.actor, obs).astype(np.float64)
            else:
                a, _ = sample_action(p, obs, rng)
            tr = env.step(RawAction(float(a[0]), float(a[1])))
            total += tr.reward
            obs = tr.observation
            if tr.termination is not Termination.RUNNING:
                break
        rewards.append(total)
        lengths.append(env.steps)
        ends.append(tr.termination.value)
    return {"mean_reward": float(np.mean(rewards)), "mean_length": float(np.mean(lengths)),
            "terminations": ends}

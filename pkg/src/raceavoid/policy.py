"""Actor-critic MLPs, Gaussian action sampling, FLOP accounting and checkpoints.

Weights are stored ``out x in`` so a dense layer is ``W @ x + b``. Hidden
layers use ``tanh``; output layers are linear. Parameters default to float32;
all functions are dtype-generic so gradient checks can run in float64.

Checkpoint layout (all integers and floats little-endian)::

    b"KEVD"  u32 version(=1)
    ---- payload ----
    u8  network count
    per network: u8 layer count L, u32 dims[L+1],
                 per layer: f32 W[out*in] row-major, f32 b[out]
    u8  action dim, f32 log_std[action dim]
    u8  adam flag; if 1: u64 step, f32 m[...] for every parameter, then f32 v[...]
    ---- end payload ----
    u32 CRC32(payload)
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .world import N_RAYS

MAGIC = b"KEVD"
FORMAT_VERSION = 1
HIDDEN = 64
ACTOR_DIMS = (N_RAYS, HIDDEN, HIDDEN, 2)
CRITIC_DIMS = (N_RAYS, HIDDEN, HIDDEN, 1)
LOG_2PI = float(np.log(2.0 * np.pi))


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    def __init__(self, field_name: str, detail: str = ""):
        self.field = field_name
        super().__init__(f"corrupt checkpoint at field {field_name!r}" + (f": {detail}" if detail else ""))


class UnsupportedVersionError(CheckpointError):
    def __init__(self, version: int):
        self.version = version
        super().__init__(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")


@dataclass
class MlpParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} does not match previous output")

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class PolicyParams:
    actor: MlpParams
    critic: MlpParams
    log_std: np.ndarray

    def arrays(self) -> list:
        """Every parameter array in canonical order (actor, critic, log_std)."""
        out = []
        for net in (self.actor, self.critic):
            for w, b in zip(net.weights, net.biases):
                out += [w, b]
        return out + [self.log_std]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.actor.copy(), self.critic.copy(), self.log_std.copy())


@dataclass
class AdamState:
    step: int
    m: list
    v: list


def init_mlp(dims, rng, hidden_gain: float = np.sqrt(2.0), out_gain: float = 1.0, dtype=np.float32) -> MlpParams:
    """Uniform init with variance ``gain**2 / fan_in``; zero biases."""
    ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        gain = out_gain if i == len(dims) - 2 else hidden_gain
        a = gain * np.sqrt(3.0 / n_in)
        ws.append(rng.uniform(-a, a, size=(n_out, n_in)).astype(dtype))
        bs.append(np.zeros(n_out, dtype=dtype))
    return MlpParams(ws, bs)


def init_policy(seed: int, actor_dims=ACTOR_DIMS, critic_dims=CRITIC_DIMS, dtype=np.float32) -> PolicyParams:
    rng = np.random.default_rng(seed)
    actor = init_mlp(actor_dims, rng, out_gain=0.01, dtype=dtype)
    critic = init_mlp(critic_dims, rng, out_gain=1.0, dtype=dtype)
    return PolicyParams(actor, critic, np.zeros(actor_dims[-1], dtype=dtype))


def forward(mlp: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch ``(B, in)``."""
    x = np.asarray(x, dtype=mlp.weights[0].dtype)
    if x.shape[-1] != mlp.weights[0].shape[1]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {mlp.weights[0].shape[1]}")
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
    return h


def forward_cached(mlp: MlpParams, x):
    """Batch forward pass that also returns the layer inputs needed for backprop."""
    acts = [x]
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def backward(mlp: MlpParams, acts, grad_out):
    """Reverse pass for :func:`forward_cached`; returns ``(dW list, db list)``."""
    n = len(mlp.weights)
    dws, dbs = [None] * n, [None] * n
    g = grad_out
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (1.0 - acts[i + 1] ** 2)
        dws[i] = g.T @ acts[i]
        dbs[i] = g.sum(axis=0)
        if i:
            g = g @ mlp.weights[i]
    return dws, dbs


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def sample_action(p: PolicyParams, obs, rng: np.random.Generator):
    """Draw ``a ~ N(mean, exp(log_std))`` and return ``(action, log_prob)`` (pre-clamp)."""
    mean = forward(p.actor, obs).astype(np.float64)
    log_std = p.log_std.astype(np.float64)
    action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return action, float(gaussian_log_prob(action, mean, log_std))


def mean_action(p: PolicyParams, obs) -> np.ndarray:
    return forward(p.actor, obs).astype(np.float64)


def count_flops(mlp) -> int:
    """Dense layers cost ``2*in*out + out``; every hidden tanh element costs 1."""
    dims = mlp.layer_dims if isinstance(mlp, MlpParams) else tuple(mlp)
    total = 0
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        total += 2 * n_in * n_out + n_out
        if i < len(dims) - 2:
            total += n_out
    return total


# ---------------------------------------------------------------------------
# checkpoints


def _pack_f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_checkpoint(p: PolicyParams, optimizer_state: AdamState | None = None) -> bytes:
    body = bytearray()
    nets = (p.actor, p.critic)
    body += struct.pack("<B", len(nets))
    for net in nets:
        dims = net.layer_dims
        body += struct.pack("<B", len(dims) - 1)
        body += struct.pack(f"<{len(dims)}I", *dims)
        for w, b in zip(net.weights, net.biases):
            body += _pack_f32(w) + _pack_f32(b)
    body += struct.pack("<B", len(p.log_std)) + _pack_f32(p.log_std)
    if optimizer_state is None:
        body += struct.pack("<B", 0)
    else:
        body += struct.pack("<BQ", 1, optimizer_state.step)
        for a in optimizer_state.m:
            body += _pack_f32(a)
        for a in optimizer_state.v:
            body += _pack_f32(a)
    body = bytes(body)
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int, field_name: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(field_name, "file truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field_name: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field_name))

    def floats(self, shape, field_name: str) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n, field_name), dtype="<f4").astype(np.float32).reshape(shape)


def decode_checkpoint(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("magic", "not a KEVD checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(version)
    start = r.pos
    (n_nets,) = r.unpack("<B", "network_count")
    if n_nets != 2:
        raise CorruptCheckpointError("network_count", f"expected 2 networks, found {n_nets}")
    nets = []
    for k in range(n_nets):
        (n_layers,) = r.unpack("<B", f"network[{k}].layer_count")
        if n_layers < 1:
            raise CorruptCheckpointError(f"network[{k}].layer_count", "zero layers")
        dims = r.unpack(f"<{n_layers + 1}I", f"network[{k}].dims")
        ws, bs = [], []
        for i in range(n_layers):
            ws.append(r.floats((dims[i + 1], dims[i]), f"network[{k}].layer[{i}].weights"))
            bs.append(r.floats((dims[i + 1],), f"network[{k}].layer[{i}].biases"))
        nets.append(MlpParams(ws, bs))
    (n_act,) = r.unpack("<B", "log_std.count")
    log_std = r.floats((n_act,), "log_std")
    params = PolicyParams(nets[0], nets[1], log_std)
    (flag,) = r.unpack("<B", "adam_flag")
    opt = None
    if flag == 1:
        (step,) = r.unpack("<Q", "adam.step")
        shapes = [a.shape for a in params.arrays()]
        m = [r.floats(s, f"adam.m[{i}]") for i, s in enumerate(shapes)]
        v = [r.floats(s, f"adam.v[{i}]") for i, s in enumerate(shapes)]
        opt = AdamState(int(step), m, v)
    elif flag != 0:
        raise CorruptCheckpointError("adam_flag", f"invalid value {flag}")
    end = r.pos
    (crc,) = r.unpack("<I", "crc32")
    if r.pos != len(buf):
        raise CorruptCheckpointError("crc32", "trailing bytes after checksum")
    if zlib.crc32(buf[start:end]) != crc:
        raise CorruptCheckpointError("crc32", "checksum mismatch")
    return params, opt


def save_checkpoint(p: PolicyParams, optimizer_state: AdamState | None, path) -> None:
    """Write ``p`` (cast to float32) and optional Adam moments to ``path``."""
    Path(path).write_bytes(encode_checkpoint(p, optimizer_state))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())

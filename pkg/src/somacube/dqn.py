"""Hierarchical legal-action-masked DQN.

A small two-head MLP (36 -> 512 -> 256 -> 128 -> 116 + 27) with explicit
forward/backward passes, additive Q combination over the 3,132-action space,
masked action selection, a ring replay buffer that stores the successor
mask, Adam with global-norm gradient clipping, and a versioned binary
checkpoint format. Implemented directly on numpy: at this size a framework
buys nothing and bit-exact, portable checkpoints are worth having.

A flat single-head variant (36 -> 512 -> 256 -> 3132) is available as an
ablation architecture.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .env import N_ACTIONS, N_POSITIONS, STATE_DIM, EmptyMaskError
from .geometry import N_ORIENTATIONS

ARCH_HIER = "hier"
ARCH_FLAT = "flat"

TRUNK_SIZES = {
    ARCH_HIER: (STATE_DIM, 512, 256, 128),
    ARCH_FLAT: (STATE_DIM, 512, 256),
}
HEAD_SIZES = {
    ARCH_HIER: (("ori", N_ORIENTATIONS), ("pos", N_POSITIONS)),
    ARCH_FLAT: (("flat", N_ACTIONS),),
}

DROPOUT_RATE = 0.3


class NonFiniteLossError(RuntimeError):
    """Training diverged: the TD loss is NaN or infinite."""


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    gamma: float = 0.99
    batch: int = 512
    target_update_every: int = 20  # episodes
    warmup: int = 1_000  # stored transitions
    grad_clip: float = 1.0
    buffer_capacity: int = 50_000
    seed: int = 42
    arch: str = ARCH_HIER
    dropout: float = DROPOUT_RATE

    def __post_init__(self) -> None:
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("lr", "batch", "target_update_every", "warmup", "grad_clip", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class EpsilonSchedule:
    """Exploration rate: exponential decay to a floor, or linear to an end."""

    kind: str = "exp"
    start: float = 0.9
    rate: float = 0.995
    floor: float = 0.05
    end: float = 0.1
    steps: int = 40_000

    def value(self, t: int) -> float:
        if self.kind == "exp":
            return max(self.floor, self.start * self.rate**t)
        if self.kind == "linear":
            if t >= self.steps:
                return self.end
            return self.start + (self.end - self.start) * t / self.steps
        raise ValueError(f"unknown schedule kind {self.kind!r}")


def combine(q_ori: np.ndarray, q_pos: np.ndarray) -> np.ndarray:
    """Additive decomposition: Q[o*27 + p] = q_ori[o] + q_pos[p]."""
    q_ori = np.asarray(q_ori)
    q_pos = np.asarray(q_pos)
    if q_ori.ndim == 1:
        return (q_ori[:, None] + q_pos[None, :]).reshape(-1)
    return (q_ori[:, :, None] + q_pos[:, None, :]).reshape(q_ori.shape[0], -1)


class QNet:
    """MLP with ReLU trunk, dropout (train-mode only), and linear heads."""

    def __init__(self, arch: str = ARCH_HIER, rng: np.random.Generator | None = None,
                 dtype=np.float32, dropout: float = DROPOUT_RATE) -> None:
        if arch not in TRUNK_SIZES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.dropout = dropout
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        sizes = TRUNK_SIZES[arch]
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            self.params[f"W{i}"] = (
                rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)).astype(dtype)
            )
            self.params[f"b{i}"] = np.zeros(fan_out, dtype=dtype)
        feat = sizes[-1]
        for name, width in HEAD_SIZES[arch]:
            self.params[f"W_{name}"] = (
                rng.normal(0.0, np.sqrt(2.0 / feat), (feat, width)).astype(dtype)
            )
            self.params[f"b_{name}"] = np.zeros(width, dtype=dtype)

    @property
    def n_trunk_layers(self) -> int:
        return len(TRUNK_SIZES[self.arch]) - 1

    @property
    def head_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in HEAD_SIZES[self.arch])

    def copy(self) -> "QNet":
        other = QNet.__new__(QNet)
        other.arch = self.arch
        other.dropout = self.dropout
        other.dtype = self.dtype
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def astype(self, dtype) -> "QNet":
        other = self.copy()
        other.dtype = dtype
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        return other

    def assert_finite(self) -> None:
        for k, v in self.params.items():
            if not np.isfinite(v).all():
                raise NonFiniteLossError(f"parameter {k} contains non-finite values")

    # -- forward/backward ------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[dict[str, np.ndarray], dict | None]:
        """Head outputs for a (batch, 36) or (36,) input.

        Eval mode is deterministic; train mode applies inverted dropout after
        every trunk activation and returns the cache for backward().
        """
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=self.dtype))
        cache: dict | None = None
        if train:
            if rng is None:
                raise ValueError("train-mode forward needs a dropout rng")
            cache = {"inputs": [], "zs": [], "drops": []}
        for i in range(self.n_trunk_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            a = np.maximum(z, 0)
            if train:
                keep = self.dtype(1.0 - self.dropout)
                u = rng.random(a.shape, dtype=np.float32).astype(self.dtype, copy=False)
                drop = (u < keep).astype(self.dtype) / keep
                cache["inputs"].append(h)
                cache["zs"].append(z)
                cache["drops"].append(drop)
                a = a * drop
            h = a
        heads = {}
        for name in self.head_names:
            q = h @ self.params[f"W_{name}"] + self.params[f"b_{name}"]
            heads[name] = q[0] if squeeze else q
        if train:
            cache["features"] = h
        return heads, cache

    def q_full(self, x: np.ndarray) -> np.ndarray:
        """Combined eval-mode Q over the full 3,132-entry action space."""
        heads, _ = self.forward(x)
        if self.arch == ARCH_HIER:
            return combine(heads["ori"], heads["pos"])
        return heads["flat"]

    def backward(self, cache: dict, grad_heads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients given per-head output gradients."""
        grads: dict[str, np.ndarray] = {}
        h = cache["features"]
        dh = np.zeros_like(h)
        for name in self.head_names:
            g = grad_heads[name]
            grads[f"W_{name}"] = h.T @ g
            grads[f"b_{name}"] = g.sum(axis=0)
            dh = dh + g @ self.params[f"W_{name}"].T
        for i in reversed(range(self.n_trunk_layers)):
            dz = dh * cache["drops"][i]
            dz = dz * (cache["zs"][i] > 0)
            grads[f"W{i}"] = cache["inputs"][i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"W{i}"].T
        return grads


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    """Greedy choice over legal entries only; illegal values are treated as
    -inf and can never influence the result. Ties break to the lowest id."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("cannot take an argmax over an empty mask")
    masked = np.where(mask, q, -np.inf)
    return int(np.argmax(masked))


def select_action(
    net: QNet,
    state_vec: np.ndarray,
    mask: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> int:
    """Epsilon-uniform over legal actions, else masked greedy argmax."""
    mask = np.asarray(mask, dtype=bool)
    legal = np.flatnonzero(mask)
    if legal.size == 0:
        raise EmptyMaskError("cannot select an action from an empty mask")
    if rng.random() < epsilon:
        return int(rng.choice(legal))
    return masked_argmax(net.q_full(state_vec), mask)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    next_mask: np.ndarray
    terminal: bool


_PACKED_MASK_BYTES = (N_ACTIONS + 7) // 8


class ReplayBuffer:
    """Fixed-capacity FIFO ring; uniform sampling without replacement."""

    def __init__(self, capacity: int = 50_000) -> None:
        self.capacity = capacity
        self.states = np.zeros((capacity, STATE_DIM), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_states = np.zeros((capacity, STATE_DIM), dtype=np.float32)
        self.next_masks = np.zeros((capacity, _PACKED_MASK_BYTES), dtype=np.uint8)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        i = self._head
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.next_masks[i] = np.packbits(np.asarray(t.next_mask, dtype=bool))
        self.terminals[i] = t.terminal
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if batch > self.size:
            raise ValueError(f"cannot sample {batch} from {self.size} stored transitions")
        idx = rng.choice(self.size, size=batch, replace=False)
        masks = np.unpackbits(self.next_masks[idx], axis=1, count=N_ACTIONS).astype(bool)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_states": self.next_states[idx],
            "next_masks": masks,
            "terminals": self.terminals[idx],
        }


class Adam:
    """Adam with global-norm gradient clipping applied before the update."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: float | None = 1.0) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            np.multiply(m, self.beta1, out=m)
            m += (1.0 - self.beta1) * g
            np.multiply(v, self.beta2, out=v)
            gg = np.square(g)
            gg *= 1.0 - self.beta2
            v += gg
            denom = np.sqrt(v / b2t)
            denom += self.eps
            np.divide(m, denom, out=denom)
            denom *= self.lr / b1t
            params[k] -= denom.astype(params[k].dtype, copy=False)


def compute_targets(
    target_net: QNet,
    rewards: np.ndarray,
    next_states: np.ndarray,
    next_masks: np.ndarray,
    terminals: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Masked Bellman targets; terminal rows are exactly the rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    q_next = target_net.q_full(next_states)  # fresh array, safe to mask in place
    q_next[~np.asarray(next_masks, dtype=bool)] = -np.inf
    best = q_next.max(axis=1).astype(np.float64)
    bad = ~terminals & ~np.isfinite(best)
    if bad.any():
        raise EmptyMaskError(
            f"{int(bad.sum())} non-terminal transitions carry an empty mask"
        )
    return np.where(terminals, rewards, rewards + gamma * best)


def td_loss_and_grads(
    net: QNet,
    batch: dict[str, np.ndarray],
    targets: np.ndarray,
    rng: np.random.Generator,
    train_mode: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared TD error on the taken actions plus its parameter grads."""
    states = batch["states"]
    actions = np.asarray(batch["actions"], dtype=np.int64)
    n = states.shape[0]
    rows = np.arange(n)
    if train_mode:
        heads, cache = net.forward(states, train=True, rng=rng)
    else:
        # dropout disabled (used by the gradient check)
        saved = net.dropout
        net.dropout = 0.0
        heads, cache = net.forward(states, train=True, rng=rng)
        net.dropout = saved

    if net.arch == ARCH_HIER:
        o_idx = actions // N_POSITIONS
        p_idx = actions % N_POSITIONS
        q_taken = heads["ori"][rows, o_idx] + heads["pos"][rows, p_idx]
    else:
        q_taken = heads["flat"][rows, actions]

    td = q_taken.astype(np.float64) - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(td**2))
    dq = (2.0 / n) * td

    grad_heads = {}
    if net.arch == ARCH_HIER:
        # one taken entry per row, so plain assignment scatters the gradient
        g_ori = np.zeros_like(heads["ori"])
        g_pos = np.zeros_like(heads["pos"])
        g_ori[rows, o_idx] = dq
        g_pos[rows, p_idx] = dq
        grad_heads["ori"] = g_ori
        grad_heads["pos"] = g_pos
    else:
        g_flat = np.zeros_like(heads["flat"])
        g_flat[rows, actions] = dq
        grad_heads["flat"] = g_flat

    grads = net.backward(cache, grad_heads)
    return loss, grads


def train_step(
    net: QNet,
    target_net: QNet,
    batch: dict[str, np.ndarray],
    cfg: TrainConfig,
    opt: Adam,
    rng: np.random.Generator,
) -> float:
    """One gradient step on a sampled batch. Returns the TD loss."""
    targets = compute_targets(
        target_net,
        batch["rewards"],
        batch["next_states"],
        batch["next_masks"],
        batch["terminals"],
        cfg.gamma,
    )
    if not np.isfinite(targets).all():
        raise NonFiniteLossError(f"non-finite Bellman target at optimizer step {opt.t + 1}")
    loss, grads = td_loss_and_grads(net, batch, targets, rng)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"TD loss is {loss!r} at optimizer step {opt.t + 1}")
    opt.step(net.params, grads)
    return loss


def sync_target(net: QNet) -> QNet:
    """Hard copy of the online network."""
    return net.copy()


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"SOMADQN\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: QNet, path) -> None:
    """Versioned binary: magic, version, arch tag, then named float32 arrays
    (shape header + little-endian data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        arch = net.arch.encode()
        fh.write(struct.pack("<H", len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<H", len(net.params)))
        for name in sorted(net.params):
            arr = np.ascontiguousarray(net.params[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"checkpoint ends inside {what}")
    return data


def _expected_shapes(arch: str) -> dict[str, tuple[int, ...]]:
    sizes = TRUNK_SIZES[arch]
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(len(sizes) - 1):
        shapes[f"W{i}"] = (sizes[i], sizes[i + 1])
        shapes[f"b{i}"] = (sizes[i + 1],)
    for name, width in HEAD_SIZES[arch]:
        shapes[f"W_{name}"] = (sizes[-1], width)
        shapes[f"b_{name}"] = (width,)
    return shapes


def load_checkpoint(path) -> QNet:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (alen,) = struct.unpack("<H", _read_exact(fh, 2, "arch tag"))
        arch = _read_exact(fh, alen, "arch tag").decode()
        if arch not in TRUNK_SIZES:
            raise ShapeMismatchError(f"unknown architecture tag {arch!r}")
        (n_arrays,) = struct.unpack("<H", _read_exact(fh, 2, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "shape"))[0] for _ in range(ndim)
            )
            count = int(np.prod(shape)) if shape else 1
            data = _read_exact(fh, 4 * count, f"data of {name}")
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()

    expected = _expected_shapes(arch)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ShapeMismatchError(f"array names mismatch: missing {missing}, extra {extra}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ShapeMismatchError(
                f"{name}: stored shape {arrays[name].shape} != expected {shape}"
            )

    net = QNet.__new__(QNet)
    net.arch = arch
    net.dropout = DROPOUT_RATE
    net.dtype = np.float32
    net.params = arrays
    return net

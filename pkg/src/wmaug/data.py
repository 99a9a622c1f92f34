"""Transitions, offline datasets, replay buffers and the ORLD file format.

Datasets are stored struct-of-arrays.  Values are held in float64 but are
always rounded to float32 on construction, so a dataset survives a trip
through its on-disk form bit for bit.

ORLD v1 layout (little endian)::

    "ORLD" | u32 version | u32 obs_dim | u32 act_dim | u64 n
    f32 states[n*obs_dim] | f32 actions[n*act_dim] | f32 rewards[n]
    f32 next_states[n*obs_dim] | u8 dones[n]
    u32 meta_len | meta (UTF-8 key=value lines: env, flavor, seed)
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .envs import make_env
from .errors import ConfigError, FormatError, UsageError
from ._binio import Reader

ORLD_MAGIC = b"ORLD"
ORLD_VERSION = 1
FLAVORS = ("random", "medium", "medium_replay", "medium_expert", "imported")


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray  # (B, obs_dim)
    actions: np.ndarray  # (B, act_dim)
    rewards: np.ndarray  # (B,)
    next_states: np.ndarray  # (B, obs_dim)
    dones: np.ndarray  # (B,) float 0/1
    augmented: np.ndarray | None = None  # rows whose next state was generated

    def __len__(self):
        return len(self.rewards)

    def transition(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]))

    def copy(self) -> "Batch":
        return Batch(self.states.copy(), self.actions.copy(), self.rewards.copy(),
                     self.next_states.copy(), self.dones.copy())


@dataclass
class OfflineDataset:
    env_name: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    flavor: str = "imported"
    seed: int = 0

    def __post_init__(self):
        self.states = _f32(self.states)
        self.actions = _f32(self.actions)
        self.rewards = _f32(self.rewards).reshape(-1)
        self.next_states = _f32(self.next_states)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        n = len(self.rewards)
        if n == 0:
            raise UsageError("empty dataset")
        if self.flavor not in FLAVORS:
            raise ConfigError(f"unknown flavor {self.flavor!r}")
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise UsageError("states and actions must be 2-D arrays")
        if not (len(self.states) == len(self.actions) == len(self.next_states)
                == len(self.dones) == n):
            raise UsageError("transition arrays have inconsistent lengths")
        if self.next_states.shape != self.states.shape:
            raise UsageError("next_states shape differs from states shape")
        for name in ("states", "actions", "rewards", "next_states"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise UsageError(f"non-finite values in {name}")

    def __len__(self):
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]))

    def take(self, index, flavor: str | None = None, seed: int | None = None) -> "OfflineDataset":
        return OfflineDataset(
            self.env_name, self.states[index], self.actions[index], self.rewards[index],
            self.next_states[index], self.dones[index],
            flavor=self.flavor if flavor is None else flavor,
            seed=self.seed if seed is None else seed,
        )

    def equals(self, other: "OfflineDataset") -> bool:
        return (
            self.env_name == other.env_name
            and self.flavor == other.flavor
            and self.seed == other.seed
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("states", "actions", "rewards", "next_states", "dones"))
        )

    def as_batch(self) -> Batch:
        return Batch(self.states, self.actions, self.rewards, self.next_states,
                     self.dones.astype(np.float64))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise UsageError("epsilon must be > 0")
        if np.any(np.asarray(self.std) < 0):
            raise UsageError("std must be non-negative")

    @classmethod
    def identity(cls, obs_dim: int) -> "NormStats":
        # 1 + 1e-17 == 1 in float64, so normalize() is the exact identity.
        return cls(np.zeros(obs_dim), np.ones(obs_dim), 1e-17)

    def normalize(self, s: np.ndarray) -> np.ndarray:
        return (s - self.mean) / (self.std + self.epsilon)

    def denormalize(self, s: np.ndarray) -> np.ndarray:
        return s * (self.std + self.epsilon) + self.mean

    def equals(self, other: "NormStats") -> bool:
        return (np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)
                and self.epsilon == other.epsilon)


def compute_norm_stats(dataset: OfflineDataset, epsilon: float = 1e-3) -> NormStats:
    """Per-dimension mean and population std of the dataset's ``states``."""
    return NormStats(dataset.states.mean(axis=0), dataset.states.std(axis=0), epsilon)


class ReplayBuffer:
    """Bounded FIFO store of raw (un-normalized) transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise UsageError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, act_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.insertions = 0

    def __len__(self):
        return min(self.insertions, self.capacity)

    def add(self, state, action, reward, next_state, done) -> None:
        i = self.insertions % self.capacity
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = float(done)
        self.insertions += 1

    def _ordered_index(self) -> np.ndarray:
        n = len(self)
        start = self.insertions % self.capacity if self.insertions > self.capacity else 0
        return (start + np.arange(n)) % self.capacity

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        return [Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                           self.next_states[i], bool(self.dones[i]))
                for i in self._ordered_index()]

    def to_dataset(self, env_name: str, flavor: str = "medium_replay", seed: int = 0) -> OfflineDataset:
        idx = self._ordered_index()
        return OfflineDataset(env_name, self.states[idx], self.actions[idx], self.rewards[idx],
                              self.next_states[idx], self.dones[idx], flavor=flavor, seed=seed)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


def sample_batch(source, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with-replacement sample from a dataset, replay buffer or batch."""
    n = len(source)
    if n == 0:
        raise UsageError("cannot sample from an empty source")
    idx = rng.integers(0, n, size=batch_size)
    if isinstance(source, ReplayBuffer):
        return source.gather(idx)
    return Batch(source.states[idx], source.actions[idx], source.rewards[idx],
                 source.next_states[idx], source.dones[idx].astype(np.float64))


def subsample_dataset(dataset: OfflineDataset, k: int, seed: int) -> OfflineDataset:
    """``k`` transitions drawn uniformly without replacement, original order kept."""
    if not 0 < k <= len(dataset):
        raise UsageError(f"cannot draw {k} transitions from a dataset of {len(dataset)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), size=k, replace=False))
    return dataset.take(idx, seed=seed)


# -- generation -----------------------------------------------------------

ActionFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def collect_transitions(
    env_name: str, act: ActionFn, size: int, seed: int, flavor: str
) -> OfflineDataset:
    """Roll out ``act(obs, rng)`` for exactly ``size`` environment steps.

    Episodes restart at the time limit.  Stored ``done`` flags stay false
    because the time limit is a truncation, not a terminal state.
    """
    if size < 1:
        raise UsageError("size must be >= 1")
    env = make_env(env_name)
    ss = np.random.SeedSequence(seed)
    reset_rng, action_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    spec = env.spec
    states = np.zeros((size, spec.obs_dim))
    actions = np.zeros((size, spec.act_dim))
    rewards = np.zeros(size)
    next_states = np.zeros((size, spec.obs_dim))
    obs = env.reset(int(reset_rng.integers(2**31 - 1)))
    for t in range(size):
        a = np.clip(act(obs, action_rng), spec.action_low, spec.action_high)
        nxt, r, truncated = env.step(a)
        states[t], actions[t], rewards[t], next_states[t] = obs, a, r, nxt
        obs = env.reset(int(reset_rng.integers(2**31 - 1))) if truncated else nxt
    return OfflineDataset(env_name, states, actions, rewards, next_states,
                          np.zeros(size, dtype=bool), flavor=flavor, seed=seed)


def noisy_policy_actions(policy: Callable, spec, noise: float) -> ActionFn:
    """Gaussian exploration around a deterministic policy (noise in action-scale units)."""

    def act(obs, rng):
        a = np.asarray(policy(obs[None, :]), dtype=np.float64).reshape(-1)
        return a + rng.normal(0.0, noise * spec.action_scale)

    return act


def generate_dataset(
    env_name: str,
    flavor: str,
    size: int,
    seed: int,
    medium_policy: Callable | None = None,
    expert_policy: Callable | None = None,
    medium_replay: OfflineDataset | None = None,
    noise: float = 0.1,
) -> OfflineDataset:
    """Build a D4RL-style dataset by construction.

    ``medium_policy`` / ``expert_policy`` map a batch of raw observations to
    actions.  ``medium_replay`` is the recorded replay stream of the run that
    produced the medium policy (see :func:`wmaug.pipeline.train_medium_policy`).
    """
    spec = make_env(env_name).spec
    if flavor == "random":
        def act(obs, rng):
            return rng.uniform(spec.action_low, spec.action_high)
        return collect_transitions(env_name, act, size, seed, "random")
    if flavor == "medium":
        if medium_policy is None:
            raise ConfigError("flavor 'medium' needs a medium checkpoint")
        return collect_transitions(env_name, noisy_policy_actions(medium_policy, spec, noise),
                                   size, seed, "medium")
    if flavor == "medium_replay":
        if medium_replay is None:
            raise ConfigError("flavor 'medium_replay' needs a medium checkpoint with its replay stream")
        if len(medium_replay) < size:
            raise ConfigError(
                f"medium replay stream holds {len(medium_replay)} transitions, {size} requested")
        return medium_replay.take(np.arange(size), flavor="medium_replay", seed=seed)
    if flavor == "medium_expert":
        if medium_policy is None or expert_policy is None:
            raise ConfigError("flavor 'medium_expert' needs medium and expert checkpoints")
        n_medium = size - size // 2
        ss = np.random.SeedSequence(seed)
        s_med, s_exp = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        med = collect_transitions(env_name, noisy_policy_actions(medium_policy, spec, noise),
                                  n_medium, s_med, "medium_expert")
        parts = [med]
        if size // 2:
            parts.append(collect_transitions(
                env_name, noisy_policy_actions(expert_policy, spec, noise),
                size // 2, s_exp, "medium_expert"))
        return concat_datasets(parts, flavor="medium_expert", seed=seed)
    raise ConfigError(f"unknown flavor {flavor!r}")


def concat_datasets(parts, flavor: str, seed: int) -> OfflineDataset:
    return OfflineDataset(
        parts[0].env_name,
        np.concatenate([p.states for p in parts]),
        np.concatenate([p.actions for p in parts]),
        np.concatenate([p.rewards for p in parts]),
        np.concatenate([p.next_states for p in parts]),
        np.concatenate([p.dones for p in parts]),
        flavor=flavor, seed=seed,
    )


# -- ORLD v1 --------------------------------------------------------------


def dataset_to_bytes(ds: OfflineDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(ORLD_MAGIC)
    buf.write(struct.pack("<IIIQ", ORLD_VERSION, ds.obs_dim, ds.act_dim, len(ds)))
    for arr in (ds.states, ds.actions, ds.rewards, ds.next_states):
        buf.write(arr.astype("<f4").tobytes())
    buf.write(ds.dones.astype(np.uint8).tobytes())
    meta = f"env={ds.env_name}\nflavor={ds.flavor}\nseed={ds.seed}\n".encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def dataset_from_bytes(data: bytes, what: str = "dataset") -> OfflineDataset:
    r = Reader(data, what=what)
    if r.take(4) != ORLD_MAGIC:
        raise FormatError(f"{what}: bad magic at offset 0")
    (version,) = r.unpack("<I")
    if version != ORLD_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at offset 4")
    obs_dim, act_dim, n = r.unpack("<IIQ")
    if n == 0:
        raise FormatError(f"{what}: empty dataset (n=0 at offset 16)")
    states = r.floats(n * obs_dim, "<f4").reshape(n, obs_dim)
    actions = r.floats(n * act_dim, "<f4").reshape(n, act_dim)
    rewards = r.floats(n, "<f4")
    next_states = r.floats(n * obs_dim, "<f4").reshape(n, obs_dim)
    dones_off = r.offset
    dones = np.frombuffer(r.take(n), dtype=np.uint8)
    if np.any(dones > 1):
        raise FormatError(f"{what}: done flags must be 0/1 (offset {dones_off})")
    (meta_len,) = r.unpack("<I")
    meta_off = r.offset
    try:
        meta_text = r.take(meta_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what}: metadata is not UTF-8 (offset {meta_off})") from exc
    if r.offset != len(data):
        raise FormatError(f"{what}: trailing bytes at offset {r.offset}")
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if "=" in line)
    try:
        return OfflineDataset(meta.get("env", ""), states, actions, rewards, next_states,
                              dones.astype(bool), flavor=meta.get("flavor", "imported"),
                              seed=int(meta.get("seed", 0)))
    except (UsageError, ConfigError, ValueError) as exc:
        raise FormatError(f"{what}: invalid contents ({exc})") from exc


def save_dataset(dataset: OfflineDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path) -> OfflineDataset:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    return dataset_from_bytes(data, what=str(path))

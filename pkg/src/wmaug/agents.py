"""TD3 and TD3+BC on hand-written MLPs, plus world-model batch augmentation.

Critics take ``normalized state ++ action``; the actor takes the normalized
state and ends in ``max_action * tanh``.  Exploration and target-smoothing
noise are expressed in units of ``max_action``, as in the reference TD3
code.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ._binio import Reader
from .data import Batch, NormStats, ReplayBuffer, sample_batch
from .envs import Env
from .errors import ConfigError, FormatError, NumericError, TrainingError, UsageError
from .nn import AdamConfig, Mlp, adam_step, net_from_reader, net_to_bytes, polyak_update
from .worldmodel import WorldModel, norm_stats_from_reader, norm_stats_to_bytes

AGCK_MAGIC = b"AGCK"
AGCK_VERSION = 1
PHASES = ("offline", "online")


@dataclass(frozen=True)
class Hyperparams:
    discount: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    exploration_noise: float = 0.1
    batch_size: int = 256
    alpha: float = 2.5
    augment_fraction: float = 0.5
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    hidden: int = 256
    n_layers: int = 3
    warm_start_steps: int = 5000
    buffer_capacity: int = 1_000_000

    def __post_init__(self):
        checks = [
            (0 < self.discount < 1, "discount must lie in (0, 1)"),
            (0 < self.tau <= 1, "tau must lie in (0, 1]"),
            (0 <= self.augment_fraction <= 1, "augment_fraction must lie in [0, 1]"),
            (self.policy_delay >= 1, "policy_delay must be >= 1"),
            (min(self.policy_noise, self.noise_clip, self.exploration_noise) >= 0,
             "noise scales must be >= 0"),
            (self.batch_size >= 1 and self.hidden >= 1 and self.n_layers >= 1,
             "batch_size, hidden and n_layers must be >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.warm_start_steps >= 0, "warm_start_steps must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "Hyperparams":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise FormatError(f"unknown hyperparameter {key!r}")
            values[key] = int(raw) if types[key] in ("int", int) else float(raw)
        return cls(**values)


@dataclass
class AgentCheckpoint:
    actor: Mlp
    critic1: Mlp
    critic2: Mlp
    target_actor: Mlp
    target_critic1: Mlp
    target_critic2: Mlp
    hyper: Hyperparams
    norm_stats: NormStats
    phase: str = "offline"
    total_it: int = 0

    @classmethod
    def create(
        cls,
        obs_dim: int,
        act_dim: int,
        max_action: float,
        hyper: Hyperparams,
        norm_stats: NormStats,
        rng: np.random.Generator,
        phase: str = "offline",
    ) -> "AgentCheckpoint":
        mid = [hyper.hidden] * (hyper.n_layers - 1)
        actor = Mlp([obs_dim, *mid, act_dim], "tanh", max_action, rng)
        critic1 = Mlp([obs_dim + act_dim, *mid, 1], rng=rng)
        critic2 = Mlp([obs_dim + act_dim, *mid, 1], rng=rng)
        return cls(actor, critic1, critic2, _target_of(actor), _target_of(critic1),
                   _target_of(critic2), hyper, norm_stats, phase)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise UsageError(f"unknown phase {self.phase!r}")
        for src, tgt in self.pairs():
            if not src.same_architecture(tgt):
                raise UsageError("target network differs from its source")

    def pairs(self):
        return [(self.actor, self.target_actor), (self.critic1, self.target_critic1),
                (self.critic2, self.target_critic2)]

    @property
    def obs_dim(self) -> int:
        return self.actor.in_dim

    @property
    def act_dim(self) -> int:
        return self.actor.out_dim

    @property
    def max_action(self) -> float:
        return self.actor.output_scale

    def copy(self) -> "AgentCheckpoint":
        return AgentCheckpoint(self.actor.copy(), self.critic1.copy(), self.critic2.copy(),
                               self.target_actor.copy(), self.target_critic1.copy(),
                               self.target_critic2.copy(), self.hyper, self.norm_stats,
                               self.phase, self.total_it)

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic action(s) for raw observation(s)."""
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        a = self.actor(self.norm_stats.normalize(np.atleast_2d(obs)))
        return a[0] if single else a

    def policy(self):
        return self.act

    def q_values(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Twin critic values for raw states."""
        x = np.hstack([self.norm_stats.normalize(states), actions])
        return self.critic1(x)[:, 0], self.critic2(x)[:, 0]


def _target_of(net: Mlp) -> Mlp:
    target = net.copy()
    target.reset_optimizer()
    return target


def sync_targets(ckpt: AgentCheckpoint) -> None:
    for src, tgt in ckpt.pairs():
        tgt.load_params_from(src)


# -- losses ---------------------------------------------------------------


def augment_batch(batch: Batch, wm: WorldModel | None, fraction: float,
                  rng: np.random.Generator) -> Batch:
    """Replace next states of ``floor(fraction * B)`` non-terminal transitions.

    The replacements are drawn from the world model in sample mode.  The
    input batch is left untouched; the returned batch shares every array
    except ``next_states`` and records the replaced rows in ``augmented``.
    Fewer rows are replaced only when the batch has fewer non-terminals.
    """
    if wm is None or fraction <= 0.0:
        return batch
    if not wm.trained_on_normalized:
        raise UsageError("world model was not trained in normalized state space")
    B = len(batch)
    candidates = np.flatnonzero(batch.dones == 0)
    k = min(int(math.floor(fraction * B + 1e-9)), len(candidates))
    chosen = np.sort(rng.choice(candidates, size=k, replace=False)) if k else np.zeros(0, int)
    next_states = batch.next_states.copy()
    if k:
        next_states[chosen] = wm.generate_next_state(
            batch.states[chosen], batch.actions[chosen], rng, mode="sample")
    return Batch(batch.states, batch.actions, batch.rewards, next_states, batch.dones,
                 augmented=chosen)


def compute_td_target(ckpt: AgentCheckpoint, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """Clipped double-Q target with target-policy smoothing, shape ``(B, 1)``."""
    h = ckpt.hyper
    m = ckpt.max_action
    s2 = batch.next_states
    noise = rng.normal(0.0, h.policy_noise * m, size=(len(batch), ckpt.act_dim))
    noise = np.clip(noise, -h.noise_clip * m, h.noise_clip * m)
    a2 = np.clip(ckpt.target_actor(s2) + noise, -m, m)
    x2 = np.hstack([s2, a2])
    q_next = np.minimum(ckpt.target_critic1(x2), ckpt.target_critic2(x2))
    return batch.rewards[:, None] + h.discount * (1.0 - batch.dones[:, None]) * q_next


def critic_loss(ckpt: AgentCheckpoint, batch: Batch, target: np.ndarray):
    """``MSE(Q1, y) + MSE(Q2, y)`` and gradients for both critics."""
    x = np.hstack([batch.states, batch.actions])
    B = len(batch)
    q1, c1 = ckpt.critic1.forward(x)
    q2, c2 = ckpt.critic2.forward(x)
    loss = float(np.mean((q1 - target) ** 2) + np.mean((q2 - target) ** 2))
    g1, _ = ckpt.critic1.backward(c1, 2.0 * (q1 - target) / B)
    g2, _ = ckpt.critic2.backward(c2, 2.0 * (q2 - target) / B)
    return loss, g1, g2


def _actor_loss(ckpt: AgentCheckpoint, states, actions, alpha: float | None):
    B = len(states)
    pi, a_cache = ckpt.actor.forward(states)
    q, c_cache = ckpt.critic1.forward(np.hstack([states, pi]))
    if alpha is None:
        lam = 1.0
        bc = 0.0
        d_pi_bc = 0.0
    else:
        lam = alpha / max(float(np.mean(np.abs(q))), 1e-8)
        diff = pi - actions
        bc = float(np.mean(diff**2))
        d_pi_bc = 2.0 * diff / diff.size
    loss = -lam * float(np.mean(q)) + bc
    _, dx = ckpt.critic1.backward(c_cache, np.full_like(q, -lam / B), need_params=False)
    grads, _ = ckpt.actor.backward(a_cache, dx[:, ckpt.obs_dim:] + d_pi_bc)
    return loss, grads, {"lambda": lam, "bc": bc, "q_mean": float(np.mean(q))}


def td3bc_actor_loss(ckpt: AgentCheckpoint, batch: Batch, alpha: float | None = None):
    """``-lambda * mean Q1(s, pi(s)) + mean (pi(s) - a)^2``, ``lambda = alpha / mean|Q1|``.

    ``lambda`` is treated as a constant.  Returns ``(loss, actor_grads, info)``.
    """
    alpha = ckpt.hyper.alpha if alpha is None else alpha
    return _actor_loss(ckpt, batch.states, batch.actions, alpha)


def td3_actor_loss(ckpt: AgentCheckpoint, batch: Batch):
    """``-mean Q1(s, pi(s))``.  Returns ``(loss, actor_grads, info)``."""
    return _actor_loss(ckpt, batch.states, None, None)


# -- update steps ---------------------------------------------------------


def _update(net: Mlp, grads, lr: float, where: str) -> None:
    try:
        adam_step(net, grads, AdamConfig(learning_rate=lr))
    except NumericError as exc:
        raise TrainingError(f"{where}: {exc}") from exc


def train_on_batch(ckpt: AgentCheckpoint, batch: Batch, rng: np.random.Generator,
                   behavior_cloning: bool) -> dict:
    """One TD3 / TD3+BC iteration on an already-normalized batch."""
    h = ckpt.hyper
    ckpt.total_it += 1
    where = f"{ckpt.phase} iteration {ckpt.total_it}"
    y = compute_td_target(ckpt, batch, rng)
    c_loss, g1, g2 = critic_loss(ckpt, batch, y)
    if not np.isfinite(c_loss):
        raise TrainingError(f"{where}: critic loss is not finite")
    _update(ckpt.critic1, g1, h.critic_lr, where)
    _update(ckpt.critic2, g2, h.critic_lr, where)
    metrics = {"critic_loss": c_loss}
    if ckpt.total_it % h.policy_delay == 0:
        if behavior_cloning:
            a_loss, ga, info = td3bc_actor_loss(ckpt, batch)
        else:
            a_loss, ga, info = td3_actor_loss(ckpt, batch)
        _update(ckpt.actor, ga, h.actor_lr, where)
        for src, tgt in ckpt.pairs():
            polyak_update(tgt, src, h.tau)
        metrics["actor_loss"] = a_loss
        metrics.update(info)
    return metrics


def offline_train_step(
    ckpt: AgentCheckpoint,
    data: Batch,
    wm: WorldModel | None,
    rng: np.random.Generator,
    aug_rng: np.random.Generator | None = None,
) -> dict:
    """TD3+BC step on a normalized offline dataset with optional augmentation.

    Augmentation draws only from ``aug_rng``, so a run with fraction 0 or no
    world model consumes ``rng`` identically to the vanilla baseline.
    """
    if ckpt.phase != "offline":
        raise UsageError("offline_train_step needs an offline-phase checkpoint")
    batch = sample_batch(data, ckpt.hyper.batch_size, rng)
    if wm is not None and ckpt.hyper.augment_fraction > 0:
        if aug_rng is None:
            raise UsageError("augmentation needs its own rng")
        batch = augment_batch(batch, wm, ckpt.hyper.augment_fraction, aug_rng)
    metrics = train_on_batch(ckpt, batch, rng, behavior_cloning=True)
    metrics["augmented"] = 0 if batch.augmented is None else len(batch.augmented)
    return metrics


class OnlineRunner:
    """Environment, current observation and replay buffer of the online phase."""

    def __init__(self, env: Env, capacity: int, seed: int):
        self.env = env
        spec = env.spec
        self.buffer = ReplayBuffer(capacity, spec.obs_dim, spec.act_dim)
        self.reset_rng = np.random.default_rng(seed)
        self.obs = env.reset(self._next_seed())
        self.env_steps = 0
        self.episode_return = 0.0
        self.episode_returns: list[float] = []

    def _next_seed(self) -> int:
        return int(self.reset_rng.integers(2**31 - 1))

    def explore(self, ckpt: AgentCheckpoint, rng: np.random.Generator) -> np.ndarray:
        m = ckpt.max_action
        a = ckpt.act(self.obs) + rng.normal(0.0, ckpt.hyper.exploration_noise * m, ckpt.act_dim)
        return np.clip(a, -m, m)

    def step(self, action: np.ndarray) -> None:
        nxt, r, truncated = self.env.step(action)
        # time-limit truncation is not a terminal state
        self.buffer.add(self.obs, action, r, nxt, False)
        self.env_steps += 1
        self.episode_return += r
        if truncated:
            self.episode_returns.append(self.episode_return)
            self.episode_return = 0.0
            self.obs = self.env.reset(self._next_seed())
        else:
            self.obs = nxt


def warm_start_buffer(ckpt: AgentCheckpoint, runner: OnlineRunner, steps: int,
                      rng: np.random.Generator) -> ReplayBuffer:
    """Fill the runner's buffer with ``steps`` noisy rollouts of the current actor."""
    if steps > runner.buffer.capacity:
        raise UsageError(f"warm start of {steps} steps exceeds capacity {runner.buffer.capacity}")
    for _ in range(steps):
        runner.step(runner.explore(ckpt, rng))
    return runner.buffer


def normalize_batch(batch: Batch, norm: NormStats) -> Batch:
    return Batch(norm.normalize(batch.states), batch.actions, batch.rewards,
                 norm.normalize(batch.next_states), batch.dones)


def online_train_step(ckpt: AgentCheckpoint, runner: OnlineRunner,
                      rng: np.random.Generator) -> dict:
    """Act once in the environment, store the raw transition, then one TD3 update.

    States are normalized at sampling time with the frozen offline statistics.
    """
    if ckpt.phase != "online":
        raise UsageError("online_train_step needs an online-phase checkpoint")
    runner.step(runner.explore(ckpt, rng))
    batch = normalize_batch(sample_batch(runner.buffer, ckpt.hyper.batch_size, rng),
                            ckpt.norm_stats)
    return train_on_batch(ckpt, batch, rng, behavior_cloning=False)


# -- serialization --------------------------------------------------------


def checkpoint_to_bytes(ckpt: AgentCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(AGCK_MAGIC)
    buf.write(struct.pack("<IBQ", AGCK_VERSION, PHASES.index(ckpt.phase), ckpt.total_it))
    hyper = ckpt.hyper.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(hyper)))
    buf.write(hyper)
    buf.write(norm_stats_to_bytes(ckpt.norm_stats))
    for net in (ckpt.actor, ckpt.critic1, ckpt.critic2,
                ckpt.target_actor, ckpt.target_critic1, ckpt.target_critic2):
        buf.write(net_to_bytes(net))
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes, what: str = "checkpoint") -> AgentCheckpoint:
    r = Reader(data, what=what)
    if r.take(4) != AGCK_MAGIC:
        raise FormatError(f"{what}: bad magic at offset 0")
    version, phase, total_it = r.unpack("<IBQ")
    if version != AGCK_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at offset 4")
    if phase >= len(PHASES):
        raise FormatError(f"{what}: bad phase tag at offset 8")
    (n,) = r.unpack("<I")
    hyper = Hyperparams.from_text(r.take(n).decode("utf-8"))
    norm = norm_stats_from_reader(r)
    if norm is None:
        raise FormatError(f"{what}: missing normalization statistics")
    nets = [net_from_reader(r) for _ in range(6)]
    if r.offset != len(data):
        raise FormatError(f"{what}: trailing bytes at offset {r.offset}")
    return AgentCheckpoint(*nets, hyper=hyper, norm_stats=norm, phase=PHASES[phase],
                           total_it=total_it)


def save_checkpoint(ckpt: AgentCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> AgentCheckpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data, what=str(path))


def with_phase(ckpt: AgentCheckpoint, phase: str) -> AgentCheckpoint:
    out = ckpt.copy()
    out.phase = phase
    return out


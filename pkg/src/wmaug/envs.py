"""Deterministic continuous-control tasks and normalized-score anchors.

Two tasks are built in:

``pendulum``
    Torque-limited swing-up. State ``(theta, theta_dot)``, observation
    ``(cos theta, sin theta, theta_dot)``, torque in ``[-2, 2]``, 200 steps.
``pointmass``
    2-D point mass driven by an acceleration in ``[-1, 1]^2`` toward the
    origin, 100 steps.

Episodes end only through the time limit; there are no failure states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CalibrationError, ConfigError, FormatError, NumericError, UsageError

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    reward_min: float  # lower bound of the per-step reward; the upper bound is 0

    @property
    def action_scale(self) -> np.ndarray:
        return (self.action_high - self.action_low) / 2.0


def wrap_angle(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class Env:
    spec: EnvSpec

    def __init__(self):
        self.state = np.zeros(0)
        self.step_counter = 0

    def reset(self, seed: int) -> np.ndarray:
        self.state = self._initial_state(np.random.default_rng(seed))
        self.step_counter = 0
        return self.observe()

    def set_state(self, state, step_counter: int = 0) -> np.ndarray:
        self.state = np.array(state, dtype=np.float64)
        self.step_counter = step_counter
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        """Advance one step.  ``done`` is true only at the time limit."""
        if self.step_counter >= self.spec.max_episode_steps:
            raise UsageError("episode finished; call reset()")
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.act_dim)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite action {a}")
        a = np.clip(a, self.spec.action_low, self.spec.action_high)
        self.state, reward = self.dynamics(self.state, a)
        self.step_counter += 1
        return self.observe(), reward, self.step_counter >= self.spec.max_episode_steps

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        raise NotImplementedError

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class Pendulum(Env):
    g = 10.0
    m = 1.0
    length = 1.0
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    spec = EnvSpec(
        name="pendulum",
        obs_dim=3,
        act_dim=1,
        action_low=np.array([-2.0]),
        action_high=np.array([2.0]),
        max_episode_steps=200,
        reward_min=-(math.pi**2 + 0.1 * 64 + 0.001 * 4),
    )

    def _initial_state(self, rng):
        return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])

    def observe(self):
        th, thdot = self.state
        return np.array([np.cos(th), np.sin(th), thdot])

    def dynamics(self, state, action):
        th, thdot = state
        u = action[0]
        reward = -(wrap_angle(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)
        accel = 3 * self.g / (2 * self.length) * np.sin(th) + 3.0 / (self.m * self.length**2) * u
        thdot = np.clip(thdot + accel * self.dt, -self.max_speed, self.max_speed)
        th = th + thdot * self.dt
        return np.array([th, thdot]), float(reward)


class PointMass2D(Env):
    dt = 0.05

    spec = EnvSpec(
        name="pointmass",
        obs_dim=4,
        act_dim=2,
        action_low=np.array([-1.0, -1.0]),
        action_high=np.array([1.0, 1.0]),
        max_episode_steps=100,
        reward_min=-(2 * math.sqrt(2) + 0.001 * 2),
    )

    def _initial_state(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def observe(self):
        return self.state.copy()

    def dynamics(self, state, action):
        p, v = state[:2], state[2:]
        v = np.clip(v + action * self.dt, -1.0, 1.0)
        p = np.clip(p + v * self.dt, -2.0, 2.0)
        reward = -np.linalg.norm(p) - 0.001 * float(action @ action)
        return np.concatenate([p, v]), float(reward)


ENVS = {"pendulum": Pendulum, "pointmass": PointMass2D}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def env_spec(name: str) -> EnvSpec:
    return make_env(name).spec


def rollout_returns(
    env_name: str, policy: Policy, episodes: int, seed: int
) -> np.ndarray:
    """Undiscounted returns of ``policy`` over seeded episodes.

    All episodes run in lockstep so the policy sees one batched observation
    array per step.  Episode ``i`` resets with the ``i``-th seed drawn from
    ``default_rng(seed)``.
    """
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=episodes)
    envs = [make_env(env_name) for _ in range(episodes)]
    obs = np.stack([e.reset(int(s)) for e, s in zip(envs, seeds)])
    returns = np.zeros(episodes)
    for _ in range(envs[0].spec.max_episode_steps):
        actions = np.asarray(policy(obs), dtype=np.float64).reshape(episodes, -1)
        for i, e in enumerate(envs):
            obs[i], r, _ = e.step(actions[i])
            returns[i] += r
    return returns


def uniform_random_policy(spec: EnvSpec, rng: np.random.Generator) -> Policy:
    def act(obs):
        return rng.uniform(spec.action_low, spec.action_high, size=(len(obs), spec.act_dim))

    return act


@dataclass(frozen=True)
class ReferenceScores:
    env_name: str
    random_ref: float
    expert_ref: float
    episodes: int
    seed: int

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")

    def save(self, path) -> None:
        lines = [
            f"name={self.env_name}",
            f"random_ref={self.random_ref!r}",
            f"expert_ref={self.expert_ref!r}",
            f"episodes={self.episodes}",
            f"seed={self.seed}",
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ReferenceScores":
        fields = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read reference scores {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            fields[key.strip()] = value.strip()
        try:
            return cls(
                env_name=fields["name"],
                random_ref=float(fields["random_ref"]),
                expert_ref=float(fields["expert_ref"]),
                episodes=int(fields["episodes"]),
                seed=int(fields["seed"]),
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed reference scores ({exc})") from exc


def calibrate_references(
    env_name: str,
    expert_policy: Policy | str | None = None,
    episodes: int = 100,
    seed: int = 0,
    out=None,
    **expert_training,
) -> ReferenceScores:
    """Measure the random and expert anchors of the normalized score.

    ``expert_policy="random"`` replays the exact random policy used for the
    lower anchor (a sanity check that must fail).  Without ``expert_policy``
    a fully-online TD3 agent is trained first
    (keyword arguments are forwarded to
    :func:`wmaug.pipeline.train_online_expert`).
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    spec = env_spec(env_name)
    ss = np.random.SeedSequence(seed)
    random_seed, action_seed, expert_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    random_policy = uniform_random_policy(spec, np.random.default_rng(action_seed))
    random_ref = float(rollout_returns(env_name, random_policy, episodes, random_seed).mean())
    if isinstance(expert_policy, str) and expert_policy == "random":
        expert_policy = uniform_random_policy(spec, np.random.default_rng(action_seed))
    elif expert_policy is None:
        from .pipeline import train_online_expert

        expert_policy = train_online_expert(env_name, seed=seed, **expert_training).policy()
    expert_ref = float(rollout_returns(env_name, expert_policy, episodes, random_seed).mean())
    if not expert_ref > random_ref:
        raise CalibrationError(
            f"expert return {expert_ref:.3f} does not beat random return {random_ref:.3f}"
        )
    refs = ReferenceScores(env_name, random_ref, expert_ref, episodes, seed)
    if out is not None:
        refs.save(out)
    return refs

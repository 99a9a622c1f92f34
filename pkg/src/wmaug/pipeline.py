"""Offline-to-online experiment orchestration, scoring and critic diagnosis.

An experiment runs, in order: world-model training on the offline dataset
(when augmentation is on), TD3+BC pre-training, then TD3 fine-tuning
initialised from the pre-trained networks according to ``init_mode``.
A single master seed fans out into named random streams so that variants
of one experiment share data order and initial weights.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .agents import (
    AgentCheckpoint,
    Hyperparams,
    OnlineRunner,
    load_checkpoint,
    offline_train_step,
    online_train_step,
    save_checkpoint,
    sync_targets,
    warm_start_buffer,
)
from .data import NormStats, OfflineDataset, compute_norm_stats, load_dataset
from .envs import ReferenceScores, env_spec, make_env, rollout_returns
from .errors import ConfigError, TrainingError, UsageError, WmaugError
from .worldmodel import (
    WmTrainConfig,
    WorldModel,
    normalized_copy,
    save_world_model,
    train_world_model,
)

log = logging.getLogger(__name__)

INIT_MODES = ("both", "actor_only", "critic_only", "none")
CURVE_HEADER = ["phase", "iter", "env_steps", "mean_return", "std_return", "normalized_score"]
ANALYSIS_HEADER = ["step", "q1", "q2", "bound_low", "bound_high"]

_STREAMS = {"wm": 1, "agent": 2, "env": 3, "eval": 4, "augmentation": 5, "init": 6, "online": 7}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],)))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31 - 1))


# -- configuration --------------------------------------------------------


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    dataset: str = ""
    seed: int = 0
    refs: str = ""
    out_dir: str = "runs/experiment"
    init_mode: str = "both"
    augment: bool = True
    augment_fraction: float = 0.5
    wm_latent_dim: int = 0  # 0 means obs_dim
    wm_hidden: int = 512
    wm_layers: int = 4
    wm_iterations: int = 20_000
    wm_batch_size: int = 256
    offline_iterations: int = 50_000
    online_iterations: int = 100_000
    eval_every: int = 5000
    eval_episodes: int = 10
    hidden: int = 256
    n_layers: int = 3
    batch_size: int = 256
    discount: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    exploration_noise: float = 0.1
    alpha: float = 2.5
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    warm_start_steps: int = 5000
    buffer_capacity: int = 1_000_000
    stop_score: float = 0.0  # > 0 ends the online phase once an evaluation reaches it
    expert_ckpt: str = ""  # optional; enables the critic analysis artifact

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        for name in ("offline_iterations", "online_iterations", "wm_iterations",
                     "warm_start_steps", "wm_latent_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("eval_every and eval_episodes must be >= 1")
        if not 0.0 <= self.augment_fraction <= 1.0:
            raise ConfigError("augment_fraction must lie in [0, 1]")
        env_spec(self.env)
        self.hyper()

    def hyper(self) -> Hyperparams:
        return Hyperparams(
            discount=self.discount, tau=self.tau, policy_noise=self.policy_noise,
            noise_clip=self.noise_clip, policy_delay=self.policy_delay,
            exploration_noise=self.exploration_noise, batch_size=self.batch_size,
            alpha=self.alpha, augment_fraction=self.augment_fraction if self.augment else 0.0,
            actor_lr=self.actor_lr, critic_lr=self.critic_lr, hidden=self.hidden,
            n_layers=self.n_layers, warm_start_steps=self.warm_start_steps,
            buffer_capacity=self.buffer_capacity,
        )

    @property
    def variant(self) -> str:
        if self.init_mode == "none" and not self.augment:
            return "fully_online"
        if not self.augment:
            return "vanilla" if self.init_mode == "both" else f"vanilla_{self.init_mode}"
        return "ours" if self.init_mode == "both" else f"ours_{self.init_mode}"

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def parse_values(cls, values: dict[str, str]) -> dict:
        """Convert raw strings to typed values; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = _convert(key, types[key], str(raw).strip())
        return out

    @classmethod
    def values_from_text(cls, text: str) -> dict:
        """Typed values of the keys present in ``key=value`` text (``#`` starts a comment)."""
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"config line {lineno}: expected key=value")
            raw[key.strip()] = value
        return cls.parse_values(raw)

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        values = cls.values_from_text(text)
        values.update(overrides or {})
        return cls(**values)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, typ, raw: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key} ({typ})") from None


# -- scoring and evaluation ----------------------------------------------


def normalized_score(ret: float, refs: ReferenceScores) -> float:
    gap = refs.expert_ref - refs.random_ref
    if not gap > 0:
        raise ConfigError("degenerate reference scores: expert_ref must exceed random_ref")
    return 100.0 * (ret - refs.random_ref) / gap


@dataclass
class EvalRecord:
    phase: str
    iteration: int
    env_steps: int
    mean_return: float
    std_return: float
    normalized_score: float

    def row(self) -> list[str]:
        return [self.phase, str(self.iteration), str(self.env_steps), repr(self.mean_return),
                repr(self.std_return), repr(self.normalized_score)]


def evaluate_policy(
    ckpt: AgentCheckpoint,
    env_name: str,
    episodes: int,
    seed: int,
    refs: ReferenceScores,
    phase: str = "online",
    iteration: int = 0,
    env_steps: int = 0,
) -> EvalRecord:
    """Deterministic-actor returns over seeded episodes, with normalized score."""
    returns = rollout_returns(env_name, ckpt.act, episodes, seed)
    mean = float(returns.mean())
    return EvalRecord(phase, iteration, env_steps, mean, float(returns.std()),
                      normalized_score(mean, refs))


def write_curve(records: list[EvalRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in records:
            w.writerow(r.row())


def read_curve(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalRecord(r["phase"], int(r["iter"]), int(r["env_steps"]), float(r["mean_return"]),
                       float(r["std_return"]), float(r["normalized_score"])) for r in rows]


# -- phases ---------------------------------------------------------------


@dataclass
class PhaseResult:
    checkpoint: AgentCheckpoint
    curve: list[EvalRecord] = field(default_factory=list)
    world_model: WorldModel | None = None
    env_steps: int = 0
    runner: OnlineRunner | None = None


def _eval_points(total: int, every: int) -> set[int]:
    points = set(range(every, total + 1, every))
    if total > 0:
        points.add(total)
    return points


def fresh_checkpoint(config: ExperimentConfig, norm: NormStats, phase: str) -> AgentCheckpoint:
    spec = env_spec(config.env)
    return AgentCheckpoint.create(spec.obs_dim, spec.act_dim, float(spec.action_high[0]),
                                  config.hyper(), norm, substream(config.seed, "init"), phase)


def run_offline_phase(
    config: ExperimentConfig, dataset: OfflineDataset, refs: ReferenceScores
) -> PhaseResult:
    """World model (if augmenting) then TD3+BC with periodic evaluation."""
    norm = compute_norm_stats(dataset)
    wm = None
    if config.augment and config.augment_fraction > 0:
        wm = WorldModel.create(dataset.obs_dim, dataset.act_dim, config.wm_latent_dim or None,
                               config.wm_hidden, config.wm_layers, substream(config.seed, "wm"))
        wm_cfg = WmTrainConfig(iterations=config.wm_iterations, batch_size=config.wm_batch_size,
                               seed=substream_seed(config.seed, "wm"))
        train_world_model(wm, dataset, norm, wm_cfg)
        log.info("world model trained for %d iterations", config.wm_iterations)
    ckpt = fresh_checkpoint(config, norm, "offline")
    data = normalized_copy(dataset, norm)
    rng = substream(config.seed, "agent")
    aug_rng = substream(config.seed, "augmentation")
    eval_seed = substream_seed(config.seed, "eval")
    points = _eval_points(config.offline_iterations, config.eval_every)
    result = PhaseResult(ckpt, world_model=wm)
    for it in range(1, config.offline_iterations + 1):
        offline_train_step(ckpt, data, wm, rng, aug_rng)
        if it in points:
            rec = evaluate_policy(ckpt, config.env, config.eval_episodes, eval_seed, refs,
                                  "offline", it, 0)
            result.curve.append(rec)
            log.info("offline %d: return %.1f score %.1f", it, rec.mean_return,
                     rec.normalized_score)
    return result


def initialise_online(
    config: ExperimentConfig, offline: AgentCheckpoint | None, norm: NormStats | None = None
) -> AgentCheckpoint:
    """Online starting point according to ``config.init_mode``.

    Pre-trained networks keep their weights, optimizer moments start fresh,
    and every target network is re-synchronised with its online copy.
    """
    if config.init_mode != "none" and offline is None:
        raise ConfigError(f"init_mode={config.init_mode} needs an offline checkpoint")
    if norm is None:
        norm = offline.norm_stats if offline is not None else NormStats.identity(
            env_spec(config.env).obs_dim)
    ckpt = fresh_checkpoint(config, norm, "online")
    if config.init_mode in ("both", "actor_only"):
        ckpt.actor.load_params_from(offline.actor)
    if config.init_mode in ("both", "critic_only"):
        ckpt.critic1.load_params_from(offline.critic1)
        ckpt.critic2.load_params_from(offline.critic2)
    sync_targets(ckpt)
    return ckpt


def train_online(
    ckpt: AgentCheckpoint,
    env_name: str,
    iterations: int,
    seed: int,
    refs: ReferenceScores | None = None,
    eval_every: int = 5000,
    eval_episodes: int = 10,
    stop_score: float = 0.0,
    on_eval: Callable[[EvalRecord, OnlineRunner], bool] | None = None,
) -> PhaseResult:
    """Warm start then TD3 for ``iterations`` environment steps.

    Evaluations happen every ``eval_every`` iterations (and at the end) when
    ``refs`` is given.  ``on_eval`` may return True to stop early.
    """
    if ckpt.phase != "online":
        raise UsageError("train_online needs an online-phase checkpoint")
    hyper = ckpt.hyper
    runner = OnlineRunner(make_env(env_name), hyper.buffer_capacity, substream_seed(seed, "env"))
    rng = substream(seed, "online")
    warm_start_buffer(ckpt, runner, hyper.warm_start_steps, rng)
    eval_seed = substream_seed(seed, "eval")
    points = _eval_points(iterations, eval_every) if refs is not None else set()
    result = PhaseResult(ckpt, runner=runner)
    for it in range(1, iterations + 1):
        online_train_step(ckpt, runner, rng)
        if it in points:
            rec = evaluate_policy(ckpt, env_name, eval_episodes, eval_seed, refs, "online",
                                  it, runner.env_steps)
            result.curve.append(rec)
            log.info("online %d: return %.1f score %.1f", it, rec.mean_return,
                     rec.normalized_score)
            if stop_score > 0 and rec.normalized_score >= stop_score:
                break
            if on_eval is not None and on_eval(rec, runner):
                break
    result.env_steps = runner.env_steps
    return result


def run_online_phase(
    config: ExperimentConfig,
    offline_checkpoint: AgentCheckpoint | None,
    refs: ReferenceScores,
    norm: NormStats | None = None,
) -> PhaseResult:
    ckpt = initialise_online(config, offline_checkpoint, norm)
    return train_online(ckpt, config.env, config.online_iterations, config.seed, refs,
                        config.eval_every, config.eval_episodes, config.stop_score)


# -- reference policies ---------------------------------------------------


def train_online_expert(
    env_name: str,
    seed: int = 0,
    iterations: int = 30_000,
    hidden: int = 256,
    **hyper_overrides,
) -> AgentCheckpoint:
    """Fully-online TD3 used as the expert anchor of the normalized score."""
    spec = env_spec(env_name)
    hyper = Hyperparams(hidden=hidden, augment_fraction=0.0, **hyper_overrides)
    ckpt = AgentCheckpoint.create(spec.obs_dim, spec.act_dim, float(spec.action_high[0]), hyper,
                                  NormStats.identity(spec.obs_dim), substream(seed, "init"),
                                  "online")
    return train_online(ckpt, env_name, iterations, seed).checkpoint


def train_medium_policy(
    env_name: str,
    refs: ReferenceScores,
    seed: int = 0,
    threshold: float = 40.0,
    max_iterations: int = 100_000,
    eval_every: int = 1000,
    eval_episodes: int = 10,
    hidden: int = 256,
    **hyper_overrides,
) -> tuple[AgentCheckpoint, OfflineDataset]:
    """First evaluation checkpoint of a fully-online TD3 run scoring >= ``threshold``.

    Also returns that run's replay buffer, oldest first, as a
    ``medium_replay`` dataset.
    """
    spec = env_spec(env_name)
    hyper = Hyperparams(hidden=hidden, augment_fraction=0.0, **hyper_overrides)
    ckpt = AgentCheckpoint.create(spec.obs_dim, spec.act_dim, float(spec.action_high[0]), hyper,
                                  NormStats.identity(spec.obs_dim), substream(seed, "init"),
                                  "online")
    found = {}

    def crossed(rec, runner):
        if rec.normalized_score >= threshold:
            found["ckpt"] = ckpt.copy()
            found["replay"] = runner.buffer.to_dataset(env_name, "medium_replay", seed)
            return True
        return False

    train_online(ckpt, env_name, max_iterations, seed, refs, eval_every, eval_episodes,
                 on_eval=crossed)
    if not found:
        raise TrainingError(f"no evaluation reached normalized score {threshold} "
                            f"within {max_iterations} iterations")
    return found["ckpt"], found["replay"]


# -- critic analysis ------------------------------------------------------


@dataclass
class CriticAnalysis:
    q1: np.ndarray
    q2: np.ndarray
    bound_low: float
    bound_high: float

    @property
    def summary(self) -> dict:
        return {"min": float(self.q1.min()), "max": float(self.q1.max()),
                "mean": float(self.q1.mean())}

    def fraction_within(self, low_slack: float = 0.2, high_slack: float = 0.05) -> float:
        """Share of Q1 values inside the bound band widened by the given slacks."""
        span = abs(self.bound_low)
        lo = self.bound_low - low_slack * span
        hi = self.bound_high + high_slack * span
        return float(np.mean((self.q1 >= lo) & (self.q1 <= hi)))

    def flagged(self, low_slack: float = 0.2, high_slack: float = 0.05) -> bool:
        return self.fraction_within(low_slack, high_slack) < 1.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ANALYSIS_HEADER)
            for t, (a, b) in enumerate(zip(self.q1, self.q2)):
                w.writerow([t, repr(float(a)), repr(float(b)), repr(self.bound_low),
                            repr(self.bound_high)])


def expert_episode(env_name: str, policy: Callable, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """States and actions of one deterministic rollout."""
    env = make_env(env_name)
    obs = env.reset(seed)
    states, actions = [], []
    done = False
    while not done:
        a = np.asarray(policy(obs[None, :]), dtype=np.float64).reshape(-1)
        states.append(obs)
        actions.append(np.clip(a, env.spec.action_low, env.spec.action_high))
        obs, _, done = env.step(actions[-1])
    return np.array(states), np.array(actions)


def analyze_critic(
    ckpt: AgentCheckpoint, states: np.ndarray, actions: np.ndarray, reward_min: float, out=None
) -> CriticAnalysis:
    """Q-values of both critics along an episode, with the exact-Q bound band."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    if states.shape[1] != ckpt.obs_dim or actions.shape[1] != ckpt.act_dim \
            or len(states) != len(actions):
        raise UsageError("episode dimensions do not match the checkpoint")
    q1, q2 = ckpt.q_values(states, actions)
    result = CriticAnalysis(q1, q2, reward_min / (1.0 - ckpt.hyper.discount), 0.0)
    if out is not None:
        result.write_csv(out)
    return result


# -- full experiment ------------------------------------------------------


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, files: list[Path], tags: dict) -> Path:
    lines = [f"{k}={format_value(v)}" for k, v in tags.items()]
    lines += [f"file={p.name} sha256={file_digest(p)}" for p in files]
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@dataclass
class ExperimentResult:
    manifest: Path
    curve: list[EvalRecord]
    offline: PhaseResult | None
    online: PhaseResult
    files: list[Path]


def run_experiment(
    config: ExperimentConfig,
    dataset: OfflineDataset | None = None,
    refs: ReferenceScores | None = None,
) -> ExperimentResult:
    """Offline phase, online phase, merged curve and manifest under ``out_dir``.

    Files already written stay in place when a phase fails; the manifest
    then carries ``status=failed``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    tags = {"variant": config.variant, "init_mode": config.init_mode,
            "augment": config.augment, "seed": config.seed, "env": config.env,
            "status": "running"}
    cfg_path = out / "resolved_config.txt"
    cfg_path.write_text(config.to_text(), encoding="utf-8")
    files.append(cfg_path)
    try:
        if refs is None:
            if not config.refs:
                raise ConfigError("reference scores are required (refs=...)")
            refs = ReferenceScores.load(config.refs)
        if refs.env_name != config.env:
            raise ConfigError(f"reference scores are for {refs.env_name!r}, not {config.env!r}")
        normalized_score(refs.random_ref, refs)  # rejects degenerate anchors
        if dataset is None and config.dataset:
            dataset = load_dataset(config.dataset)
        needs_offline = config.init_mode != "none" or config.offline_iterations > 0
        if needs_offline and dataset is None:
            raise ConfigError("an offline dataset is required for this init_mode")
        if dataset is not None and dataset.env_name not in ("", config.env):
            raise ConfigError(f"dataset is for {dataset.env_name!r}, not {config.env!r}")

        offline = None
        curve: list[EvalRecord] = []
        norm = compute_norm_stats(dataset) if dataset is not None else None
        if needs_offline:
            offline = run_offline_phase(config, dataset, refs)
            curve += offline.curve
            p = out / "offline.agck"
            save_checkpoint(offline.checkpoint, p)
            files.append(p)
            if offline.world_model is not None:
                p = out / "world_model.wmck"
                save_world_model(offline.world_model, p)
                files.append(p)
        online = run_online_phase(config, offline.checkpoint if offline else None, refs, norm)
        curve += online.curve
        p = out / "online.agck"
        save_checkpoint(online.checkpoint, p)
        files.append(p)
        p = out / "curve.csv"
        write_curve(curve, p)
        files.append(p)
        if config.expert_ckpt and offline is not None:
            expert = load_checkpoint(config.expert_ckpt)
            s, a = expert_episode(config.env, expert.act, substream_seed(config.seed, "eval"))
            p = out / "critic_analysis.csv"
            analyze_critic(offline.checkpoint, s, a, env_spec(config.env).reward_min, p)
            files.append(p)
        tags["env_steps"] = online.env_steps
        tags["status"] = "ok"
        return ExperimentResult(write_manifest(out, files, tags), curve, offline, online, files)
    except WmaugError:
        tags["status"] = "failed"
        write_manifest(out, [f for f in files if f.exists()], tags)
        raise


def first_crossing(curve: list[EvalRecord], threshold: float, phase: str = "online") -> int | None:
    """Environment steps at the first evaluation of ``phase`` scoring >= ``threshold``."""
    for rec in curve:
        if rec.phase == phase and rec.normalized_score >= threshold:
            return rec.env_steps
    return None


def merge_curves(paths: dict[str, Path], out) -> None:
    """Concatenate curve files with a leading ``run`` column."""
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", *CURVE_HEADER])
        for name, path in paths.items():
            for rec in read_curve(path):
                w.writerow([name, *rec.row()])

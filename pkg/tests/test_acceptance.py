"""End-to-end acceptance checks at desk scale, one test per criterion.

Every test records a one-line verdict that is printed in the terminal
summary.  Expensive artifacts (reference scores, medium policy, datasets,
experiment runs) are built once per session under ``WMAUG_ACCEPT_DIR``
(a temporary directory when unset) and reused when already present there.

Desk profile: actor/critic width 64, world-model width 128, five seeds,
medians across seeds.
"""

import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import record_criterion
from wmaug.agents import (
    augment_batch,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    save_checkpoint,
)
from wmaug.checks import run_grad_checks
from wmaug.cli import main as cli_main
from wmaug.data import (
    compute_norm_stats,
    dataset_from_bytes,
    dataset_to_bytes,
    generate_dataset,
    load_dataset,
    sample_batch,
    save_dataset,
)
from wmaug.envs import ReferenceScores, calibrate_references, env_spec
from wmaug.pipeline import (
    ExperimentConfig,
    analyze_critic,
    expert_episode,
    first_crossing,
    read_curve,
    run_experiment,
    run_online_phase,
    train_medium_policy,
    train_online_expert,
    write_curve,
)
from wmaug.worldmodel import (
    WmTrainConfig,
    WorldModel,
    kl_to_standard_normal,
    load_world_model,
    normalized_copy,
    one_step_mse,
    train_world_model,
)

pytestmark = pytest.mark.acceptance

ENV = "pendulum"
SEEDS = range(5)
HIDDEN = 64
WM_HIDDEN = 128
WM_LAYERS = 4
LATENT = 3
DATASET_SIZE = 10_000
THRESHOLD = 90.0
ONLINE_BUDGET = 100_000  # environment steps, warm start included

RUN = dict(
    env=ENV, hidden=HIDDEN, wm_hidden=WM_HIDDEN, wm_layers=WM_LAYERS, wm_iterations=5000,
    offline_iterations=20_000, online_iterations=25_000, eval_every=1000, eval_episodes=10,
)


class Lab:
    """Lazily built, cached artifacts shared by the criteria."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def refs(self) -> ReferenceScores:
        p = self.path("refs.txt")
        if not p.exists():
            expert = train_online_expert(ENV, seed=0, iterations=30_000, hidden=HIDDEN)
            save_checkpoint(expert, self.path("expert.agck"))
            calibrate_references(ENV, expert.policy(), episodes=100, seed=0, out=p)
        return ReferenceScores.load(p)

    def expert(self):
        self.refs()
        return load_checkpoint(self.path("expert.agck"))

    def medium(self):
        p = self.path("medium.agck")
        if not p.exists():
            ckpt, replay = train_medium_policy(ENV, self.refs(), seed=1, hidden=HIDDEN)
            save_dataset(replay, self.path("medium_stream.orld"))
            save_checkpoint(ckpt, p)
        return load_checkpoint(p), load_dataset(self.path("medium_stream.orld"))

    def dataset(self, flavor: str):
        p = self.path(f"{flavor}_{DATASET_SIZE}.orld")
        if not p.exists():
            medium, stream = self.medium()
            ds = generate_dataset(ENV, flavor, DATASET_SIZE, seed=2, medium_policy=medium.act,
                                  medium_replay=stream)
            save_dataset(ds, p)
        return load_dataset(p)

    def experiment(self, name: str, seed: int, **overrides):
        out = self.path(f"runs/{name}_s{seed}")
        manifest = out / "manifest.txt"
        if not (manifest.exists() and "status=ok" in manifest.read_text()):
            cfg = ExperimentConfig(**{**RUN, "seed": seed, "out_dir": str(out), **overrides})
            dataset = None if cfg.init_mode == "none" and cfg.offline_iterations == 0 \
                else self.dataset("medium")
            run_experiment(cfg, dataset, self.refs())
        return out

    def ours(self, seed):
        return self.experiment("ours", seed, init_mode="both", augment=True)

    def vanilla(self, seed):
        return self.experiment("vanilla", seed, init_mode="both", augment=False)

    def baseline(self, seed):
        return self.experiment("online", seed, init_mode="none", augment=False,
                               offline_iterations=0, online_iterations=ONLINE_BUDGET - 5000,
                               stop_score=THRESHOLD)

    def ablation(self, mode: str, seed: int) -> Path:
        """Online phase from the augmented offline checkpoint of the same seed."""
        out = self.path(f"runs/ours_{mode}_s{seed}")
        curve = out / "curve.csv"
        if not curve.exists():
            offline_dir = self.ours(seed)
            offline = load_checkpoint(offline_dir / "offline.agck")
            cfg = ExperimentConfig(**{**RUN, "seed": seed, "init_mode": mode, "augment": True,
                                      "out_dir": str(out)})
            res = run_online_phase(cfg, offline, self.refs())
            out.mkdir(parents=True, exist_ok=True)
            offline_part = [r for r in read_curve(offline_dir / "curve.csv") if r.phase == "offline"]
            write_curve(offline_part + res.curve, curve)
        return out


@pytest.fixture(scope="session")
def lab(tmp_path_factory):
    root = os.environ.get("WMAUG_ACCEPT_DIR")
    return Lab(Path(root) if root else tmp_path_factory.mktemp("acceptance"))


def online(curve):
    return [r for r in curve if r.phase == "online"]


def median_crossing(dirs) -> tuple[float, list[float]]:
    steps = []
    for d in dirs:
        step = first_crossing(read_curve(d / "curve.csv"), THRESHOLD)
        steps.append(float("inf") if step is None else float(step))
    return statistics.median(steps), steps


# -- 1 --------------------------------------------------------------------


def test_gradient_integrity():
    start = time.perf_counter()
    reports = run_grad_checks(seed=0, tolerance=1e-4)
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in reports) and elapsed < 60
    record_criterion(1, ok, f"{len(reports)} suites, worst {worst.name} {worst.max_rel_error:.2e} "
                            f"(< 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


# -- 2 --------------------------------------------------------------------


def test_kl_matches_monte_carlo():
    # Pairs live in the latent size the pendulum model uses. In one dimension
    # many draws land at KL ~ 0.01, where the Monte Carlo standard error alone
    # exceeds 1% of the value, so the z-score is reported alongside.
    rng = np.random.default_rng(2024)
    worst, worst_z = 0.0, 0.0
    for _ in range(100):
        mu, log_var = rng.uniform(-2, 2, LATENT), rng.uniform(-2, 2, LATENT)
        sd = np.exp(0.5 * log_var)
        z = mu + sd * rng.standard_normal((100_000, LATENT))
        terms = np.sum(stats.norm.logpdf(z, mu, sd) - stats.norm.logpdf(z), axis=1)
        mc = float(terms.mean())
        closed = kl_to_standard_normal(mu, log_var)
        worst = max(worst, abs(closed - mc) / abs(mc))
        worst_z = max(worst_z, abs(closed - mc) / (terms.std() / np.sqrt(terms.size)))
    ok = worst < 0.01
    record_criterion(2, ok, f"100 pairs (d={LATENT}), 1e5 samples each, worst relative gap "
                            f"{100 * worst:.3f}% (< 1%), worst |z| {worst_z:.2f}")
    assert ok


# -- 3 --------------------------------------------------------------------


def test_world_model_fidelity(lab):
    train = lab.dataset("medium_replay")
    medium, _ = lab.medium()
    held_out = generate_dataset(ENV, "medium", 2000, seed=3, medium_policy=medium.act)
    norm = compute_norm_stats(train)
    start = time.perf_counter()
    wm = WorldModel.create(train.obs_dim, train.act_dim, None, WM_HIDDEN, WM_LAYERS,
                           np.random.default_rng(np.random.SeedSequence(0, spawn_key=(1,))))
    train_world_model(wm, train, norm, WmTrainConfig(iterations=20_000, seed=0))
    elapsed = time.perf_counter() - start
    mse, variance = one_step_mse(wm, held_out, norm)
    data = normalized_copy(train, norm)
    s = np.repeat(data.states[:1], 200, axis=0)
    a = np.repeat(data.actions[:1], 200, axis=0)
    spread = wm.generate_next_state(s, a, np.random.default_rng(0), mode="sample").var(axis=0)
    ratio = mse / variance
    ok = ratio < 0.1 and np.all(spread > 0) and elapsed < 600
    record_criterion(3, ok, f"held-out mse/variance {ratio:.3f} (< 0.1), sample-mode variance "
                            f"{np.array2string(spread, precision=4)} (> 0), train {elapsed:.0f}s")
    assert ok


# -- 4 --------------------------------------------------------------------


def test_baseline_reaches_threshold(lab):
    start = time.perf_counter()
    med, steps = median_crossing([lab.baseline(s) for s in SEEDS])
    elapsed = time.perf_counter() - start
    ok = med <= ONLINE_BUDGET
    record_criterion(4, ok, f"fully-online median steps to score {THRESHOLD:.0f}: {med:.0f} "
                            f"(<= {ONLINE_BUDGET}), per seed {steps}, {elapsed / 60:.1f} min")
    assert ok


# -- 5 --------------------------------------------------------------------


def test_jump_start(lab):
    ours, ours_steps = median_crossing([lab.ours(s) for s in SEEDS])
    base, _ = median_crossing([lab.baseline(s) for s in SEEDS])
    ok = ours < base
    record_criterion(5, ok, f"median steps to {THRESHOLD:.0f}: ours {ours:.0f} vs fully-online "
                            f"{base:.0f}, ours per seed {ours_steps}")
    assert ok


# -- 6 --------------------------------------------------------------------


def test_augmentation_beats_vanilla(lab):
    ours = [online(read_curve(lab.ours(s) / "curve.csv")) for s in SEEDS]
    van = [online(read_curve(lab.vanilla(s) / "curve.csv")) for s in SEEDS]
    worst_gap, worst_step, points = np.inf, None, 0
    for i, rec in enumerate(ours[0]):
        if rec.env_steps < 20_000:
            continue
        points += 1
        gap = (statistics.median(c[i].normalized_score for c in ours)
               - statistics.median(c[i].normalized_score for c in van))
        if gap < worst_gap:
            worst_gap, worst_step = gap, rec.env_steps

    # p = 0 must reproduce the vanilla run exactly
    zero = lab.experiment("ours_p0", 0, init_mode="both", augment=True, augment_fraction=0.0)
    same = all((zero / f).read_bytes() == (lab.vanilla(0) / f).read_bytes()
               for f in ("curve.csv", "offline.agck", "online.agck"))
    ok = points > 0 and worst_gap >= 0 and same
    record_criterion(6, ok, f"{points} eval points >= 20k steps, min median gap ours-vanilla "
                            f"{worst_gap:+.1f} at {worst_step} steps (>= 0); p=0 run "
                            f"{'bit-identical' if same else 'DIFFERS'} to vanilla")
    assert ok


# -- 7 --------------------------------------------------------------------


def test_critic_scale(lab):
    expert = lab.expert()
    states, actions = expert_episode(ENV, expert.act, seed=0)
    r_min = env_spec(ENV).reward_min
    fractions, flagged_vanilla = [], []
    for s in SEEDS:
        aug = load_checkpoint(lab.ours(s) / "offline.agck")
        res = analyze_critic(aug, states, actions, r_min, lab.path(f"critic_ours_s{s}.csv"))
        fractions.append(res.fraction_within(0.2, 0.05))
        van = load_checkpoint(lab.vanilla(s) / "offline.agck")
        flagged_vanilla.append(
            analyze_critic(van, states, actions, r_min, lab.path(f"critic_vanilla_s{s}.csv")).flagged())
    ok = all(f == 1.0 for f in fractions)
    record_criterion(7, ok, f"augmented critics inside band: {[f'{100 * f:.0f}%' for f in fractions]}; "
                            f"non-augmented flagged: {flagged_vanilla} (diagnostic)")
    assert ok


# -- 8 --------------------------------------------------------------------


def test_ablation_modes(lab):
    finals = {}
    for mode in ("both", "actor_only", "critic_only"):
        scores = []
        for s in SEEDS:
            d = lab.ours(s) if mode == "both" else lab.ablation(mode, s)
            curve = online(read_curve(d / "curve.csv"))
            assert curve and curve[-1].iteration == RUN["online_iterations"]
            scores.append(curve[-1].normalized_score)
        finals[mode] = statistics.median(scores)
    ok = finals["both"] >= finals["actor_only"] - 5
    record_criterion(8, ok, "final median scores " + ", ".join(f"{k} {v:.1f}" for k, v in finals.items())
                            + " (both >= actor_only - 5)")
    assert ok


# -- 9 --------------------------------------------------------------------


def test_determinism_and_formats(lab, tmp_path, monkeypatch):
    problems = []

    def twice(*argv):
        # Each run works inside its own directory with relative output paths,
        # so the two runs must agree byte for byte, config echoes included.
        outs = []
        for name in ("a", "b"):
            d = tmp_path / argv[0] / name
            d.mkdir(parents=True)
            monkeypatch.chdir(d)
            code = cli_main([str(x) for x in argv])
            if code != 0:
                problems.append(f"{argv[0]} exit {code}")
            outs.append(d)
        for fa in sorted(p for p in outs[0].rglob("*") if p.is_file()):
            if fa.read_bytes() != (outs[1] / fa.relative_to(outs[0])).read_bytes():
                problems.append(f"{argv[0]}: {fa.name} differs")

    twice("gen-dataset", "--env", ENV, "--flavor", "random", "--size", 2000, "--seed", 5,
          "--out", "d.orld")
    twice("train-wm", "--dataset", tmp_path / "gen-dataset/a/d.orld", "--iterations", 50, "--hidden", 16,
          "--seed", 1, "--out", "m.wmck")
    twice("run", "--env", ENV, "--dataset", tmp_path / "gen-dataset/a/d.orld", "--refs", lab.path("refs.txt"),
          "--hidden", 16, "--wm-hidden", 16, "--wm-iterations", 50, "--offline-iterations", 60,
          "--online-iterations", 60, "--warm-start-steps", 100, "--eval-every", 30,
          "--eval-episodes", 2, "--out-dir", "run")
    twice("analyze-critic", "--checkpoint", tmp_path / "run/a/run/offline.agck", "--env", ENV,
          "--expert-ckpt", lab.path("expert.agck"), "--out", "q.csv")
    twice("export-curves", tmp_path / "run/a/run", "--out", "all.csv")

    ds = lab.dataset("medium")
    if not dataset_from_bytes(dataset_to_bytes(ds)).equals(ds):
        problems.append("ORLD round trip")
    for s in SEEDS:
        raw = (lab.ours(s) / "offline.agck").read_bytes()
        if checkpoint_to_bytes(checkpoint_from_bytes(raw)) != raw:
            problems.append(f"checkpoint round trip seed {s}")

    wm = load_world_model(lab.ours(0) / "world_model.wmck")
    data = normalized_copy(ds, compute_norm_stats(ds))
    rng = np.random.default_rng(9)
    batches = 0
    for p in (0.1, 0.25, 0.5, 0.77, 1.0):
        for terminal_share in (0.0, 0.3, 0.9):
            for _ in range(40):
                batch = sample_batch(data, 256, rng)
                batch.dones = (rng.random(256) < terminal_share).astype(float)
                out = augment_batch(batch, wm, p, rng)
                expected = min(int(np.floor(p * 256 + 1e-9)), int((batch.dones == 0).sum()))
                changed = np.flatnonzero(np.any(out.next_states != batch.next_states, axis=1))
                if len(out.augmented) != expected or not set(changed) <= set(out.augmented) \
                        or np.any(batch.dones[out.augmented] != 0):
                    problems.append(f"augmentation count p={p} share={terminal_share}")
                batches += 1
    ok = not problems
    record_criterion(9, ok, f"5 CLI commands rerun bit-identical, ORLD + {len(SEEDS)} checkpoint round "
                            f"trips exact, {batches} augmented batches counted exactly"
                            + ("" if ok else f"; problems: {problems[:5]}"))
    assert ok

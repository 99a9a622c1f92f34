"""Command-line front end.

Every command resolves its arguments (flags, then ``WMRL_SEED`` for an
unset seed), logs them, and writes them as ``key=value`` text next to its
outputs.  Exit codes: 0 success, 2 usage or config error, 3 I/O or format
error, 4 numeric or training error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .agents import load_checkpoint, save_checkpoint
from .checks import SUITES, run_grad_checks
from .data import compute_norm_stats, generate_dataset, load_dataset, save_dataset
from .envs import ENVS, ReferenceScores, calibrate_references, env_spec
from .errors import ConfigError, FormatError, WmaugError
from .pipeline import (
    ExperimentConfig,
    format_value,
    analyze_critic,
    expert_episode,
    merge_curves,
    run_experiment,
    train_medium_policy,
    train_online_expert,
)
from .worldmodel import WmTrainConfig, WorldModel, one_step_mse, save_world_model, train_world_model

log = logging.getLogger("wmaug")

FLAVORS = ("random", "medium", "medium_replay", "medium_expert")


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get("WMRL_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"WMRL_SEED must be an integer, got {raw!r}") from None


def replay_path(medium_ckpt) -> Path:
    """Where ``train-medium`` stores the replay stream of its checkpoint."""
    return Path(f"{medium_ckpt}.replay.orld")


def echo_config(values: dict, out) -> None:
    """Log resolved arguments and write them to ``<out>.config.txt``."""
    text = "".join(f"{k}={format_value(v)}\n" for k, v in values.items())
    for line in text.splitlines():
        log.info("resolved %s", line)
    Path(f"{out}.config.txt").write_text(text, encoding="utf-8")


def _resolved(args, *skip) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "log_level", *skip)}


# -- commands -------------------------------------------------------------


def cmd_calibrate(args) -> int:
    args.seed = resolve_seed(args.seed)
    if args.expert_ckpt:
        expert = load_checkpoint(args.expert_ckpt)
    else:
        expert = train_online_expert(args.env, seed=args.seed, iterations=args.expert_iterations,
                                     hidden=args.hidden)
        if args.save_expert:
            save_checkpoint(expert, args.save_expert)
    refs = calibrate_references(args.env, expert.policy(), args.episodes, args.seed, args.out)
    echo_config(_resolved(args), args.out)
    print(f"random_ref={refs.random_ref!r} expert_ref={refs.expert_ref!r}")
    return 0


def cmd_train_medium(args) -> int:
    args.seed = resolve_seed(args.seed)
    refs = ReferenceScores.load(args.refs)
    ckpt, replay = train_medium_policy(args.env, refs, args.seed, args.threshold,
                                       args.max_iterations, args.eval_every, hidden=args.hidden)
    save_checkpoint(ckpt, args.out)
    save_dataset(replay, replay_path(args.out))
    echo_config(_resolved(args), args.out)
    print(f"medium checkpoint after {len(replay)} environment steps")
    return 0


def cmd_gen_dataset(args) -> int:
    args.seed = resolve_seed(args.seed)
    medium = load_checkpoint(args.medium_ckpt).act if args.medium_ckpt else None
    expert = load_checkpoint(args.expert_ckpt).act if args.expert_ckpt else None
    replay = None
    if args.flavor == "medium_replay":
        if not args.medium_ckpt:
            raise ConfigError("flavor 'medium_replay' needs --medium-ckpt")
        replay = load_dataset(replay_path(args.medium_ckpt))
    ds = generate_dataset(args.env, args.flavor, args.size, args.seed, medium_policy=medium,
                          expert_policy=expert, medium_replay=replay, noise=args.noise)
    save_dataset(ds, args.out)
    echo_config(_resolved(args), args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_train_wm(args) -> int:
    args.seed = resolve_seed(args.seed)
    ds = load_dataset(args.dataset)
    norm = compute_norm_stats(ds)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(1,)))
    wm = WorldModel.create(ds.obs_dim, ds.act_dim, args.latent_dim or None, args.hidden,
                           args.layers, rng)
    cfg = WmTrainConfig(iterations=args.iterations, batch_size=args.batch_size, seed=args.seed)
    result = train_world_model(wm, ds, norm, cfg)
    save_world_model(wm, args.out)
    echo_config(_resolved(args), args.out)
    if result.curve:
        print(f"final sampled loss {result.curve[-1][1].total:.6f}")
    mse, var = one_step_mse(wm, ds, norm)
    print(f"one-step mse {mse:.6f} (next-state variance {var:.6f})")
    return 0


def _config_overrides(args) -> dict:
    raw = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(ExperimentConfig)
           if getattr(args, f"cfg_{f.name}") is not None}
    return ExperimentConfig.parse_values(raw)


def cmd_run(args) -> int:
    file_text = ""
    if args.config:
        try:
            file_text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read config {args.config}: {exc}") from exc
    file_keys = ExperimentConfig.values_from_text(file_text)
    overrides = _config_overrides(args)
    if "seed" not in overrides and "seed" not in file_keys:
        overrides["seed"] = resolve_seed(None)
    for key, value in overrides.items():
        if key in file_keys and file_keys[key] != value:
            log.warning("flag --%s=%s overrides config file value %s", key.replace("_", "-"),
                        format_value(value), format_value(file_keys[key]))
    config = ExperimentConfig(**{**file_keys, **overrides})
    for line in config.to_text().splitlines():
        log.info("resolved %s", line)
    result = run_experiment(config)
    last = result.curve[-1] if result.curve else None
    summary = f"variant={config.variant} env_steps={result.online.env_steps}"
    if last is not None:
        summary += f" final_score={last.normalized_score:.1f}"
    print(summary)
    return 0


def cmd_analyze_critic(args) -> int:
    args.seed = resolve_seed(args.seed)
    ckpt = load_checkpoint(args.checkpoint)
    expert = load_checkpoint(args.expert_ckpt)
    states, actions = expert_episode(args.env, expert.act, args.seed)
    result = analyze_critic(ckpt, states, actions, env_spec(args.env).reward_min, args.out)
    echo_config(_resolved(args), args.out)
    s = result.summary
    print(f"q1 min={s['min']:.2f} max={s['max']:.2f} mean={s['mean']:.2f} "
          f"band=[{result.bound_low:.2f}, {result.bound_high:.2f}] "
          f"within={100 * result.fraction_within():.1f}% flagged={result.flagged()}")
    return 0


def cmd_grad_check(args) -> int:
    args.seed = resolve_seed(args.seed)
    reports = run_grad_checks(args.seed, args.tolerance, broken=args.inject_fault)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel error {r.max_rel_error:.3e} at {r.worst_param} "
              f"({r.n_checked} parameters)")
    return 0 if all(r.passed for r in reports) else 4


def cmd_export_curves(args) -> int:
    runs = {}
    for item in args.runs:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).name
        p = Path(path)
        runs[name] = p / "curve.csv" if p.is_dir() else p
    for name, p in runs.items():
        if not p.is_file():
            raise FormatError(f"curve file for {name!r} not found: {p}")
    merge_curves(runs, args.out)
    echo_config({"out": args.out, **{f"run.{k}": str(v) for k, v in runs.items()}}, args.out)
    print(f"merged {len(runs)} curves into {args.out}")
    return 0


# -- parser ---------------------------------------------------------------


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="master seed (default: $WMRL_SEED, else 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmaug", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    envs = sorted(ENVS)

    p = sub.add_parser("calibrate", help="measure random and expert reference returns")
    p.add_argument("--env", required=True, choices=envs)
    p.add_argument("--episodes", type=int, default=100)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.add_argument("--expert-ckpt", help="use this checkpoint instead of training an expert")
    p.add_argument("--expert-iterations", type=int, default=30_000)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--save-expert", help="write the trained expert checkpoint here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train-medium", help="train TD3 until the medium score threshold")
    p.add_argument("--env", required=True, choices=envs)
    p.add_argument("--refs", required=True)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=40.0)
    p.add_argument("--max-iterations", type=int, default=100_000)
    p.add_argument("--eval-every", type=int, default=1000)
    p.add_argument("--hidden", type=int, default=256)
    p.set_defaults(func=cmd_train_medium)

    p = sub.add_parser("gen-dataset", help="generate an offline dataset file")
    p.add_argument("--env", required=True, choices=envs)
    p.add_argument("--flavor", required=True, choices=FLAVORS)
    p.add_argument("--size", type=int, required=True)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.add_argument("--medium-ckpt")
    p.add_argument("--expert-ckpt")
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-wm", help="train a world model on a dataset")
    p.add_argument("--dataset", required=True)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--latent-dim", type=int, default=0)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--layers", type=int, default=4)
    p.set_defaults(func=cmd_train_wm)

    p = sub.add_parser("run", help="run an offline-to-online experiment")
    p.add_argument("--config", help="key=value config file; flags override its values")
    for f in fields(ExperimentConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                       metavar=str(f.type if isinstance(f.type, str) else f.type.__name__).upper())
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze-critic", help="critic Q-values along an expert episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", required=True, choices=envs)
    p.add_argument("--expert-ckpt", required=True)
    _add_seed(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_critic)

    p = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    _add_seed(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", choices=sorted(SUITES), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-curves", help="merge curve files for plotting")
    p.add_argument("runs", nargs="+", metavar="NAME=PATH",
                   help="curve file or run directory, optionally prefixed with a name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WmaugError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())

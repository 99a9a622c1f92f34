"""Pointmass walkthrough: references, dataset, world model, ours vs vanilla.

Runs in a couple of minutes on one CPU core. The expert is a hand-built
saturated PD controller, so no expert training is needed; a softer gain
plays the medium policy.

At this size the world model tends to collapse onto its prior (latent
variance near 1), so its sampled next states are mostly noise and the
augmented run usually trails vanilla here. The script prints the world
model's one-step error next to the scores so that is visible.

    python demos/quickstart.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from wmaug.agents import AgentCheckpoint, Hyperparams
from wmaug.data import NormStats, generate_dataset, save_dataset
from wmaug.envs import calibrate_references
from wmaug.pipeline import ExperimentConfig, first_crossing, merge_curves, run_experiment
from wmaug.worldmodel import one_step_mse


def pd_controller(gain: float) -> AgentCheckpoint:
    """One linear layer with a tanh head: a = tanh(-gain * p - 0.4 * gain * v)."""
    ckpt = AgentCheckpoint.create(4, 2, 1.0, Hyperparams(n_layers=1, hidden=1),
                                  NormStats.identity(4), np.random.default_rng(0), "online")
    w = ckpt.actor.params[0]
    w[...] = 0.0
    w[0, 0] = w[1, 1] = -gain
    w[2, 0] = w[3, 1] = -0.4 * gain
    return ckpt


def main(out: Path) -> None:
    env = "pointmass"
    expert, medium = pd_controller(5.0), pd_controller(0.5)

    refs = calibrate_references(env, expert.act, episodes=20, seed=0, out=out / "refs.txt")
    print(f"random {refs.random_ref:.2f}  expert {refs.expert_ref:.2f}")

    data = generate_dataset(env, "medium_expert", 4000, seed=1,
                            medium_policy=medium.act, expert_policy=expert.act)
    save_dataset(data, out / "medium_expert.orld")
    print(f"dataset: {len(data)} transitions, mean reward {data.rewards.mean():.3f}")

    common = dict(env=env, dataset=str(out / "medium_expert.orld"), refs=str(out / "refs.txt"),
                  hidden=32, wm_hidden=64, wm_iterations=1500, offline_iterations=1500,
                  online_iterations=3000, warm_start_steps=500, eval_every=500,
                  eval_episodes=5, seed=0)
    curves = {}
    for name, augment in (("ours", True), ("vanilla", False)):
        cfg = ExperimentConfig(out_dir=str(out / name), augment=augment, **common)
        result = run_experiment(cfg)
        curves[name] = out / name / "curve.csv"
        last = result.curve[-1]
        if result.offline.world_model is not None:
            wm = result.offline.world_model
            norm = result.offline.checkpoint.norm_stats
            mse, var = one_step_mse(wm, data, norm)
            _, _, log_var = wm.encode(norm.normalize(data.states), mode="mean")
            print(f"world model: one-step mse / variance {mse / var:.3f}, "
                  f"mean latent variance {np.exp(log_var).mean():.3f}")
        print(f"{name:8s} final score {last.normalized_score:6.1f}  "
              f"first >= 80 at {first_crossing(result.curve, 80.0)} env steps")
    merge_curves(curves, out / "curves.csv")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="wmaug-"))
    target.mkdir(parents=True, exist_ok=True)
    main(target)

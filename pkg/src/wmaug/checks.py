"""Finite-difference checks of every hand-written gradient in the package.

Each suite builds a small seeded problem, freezes any randomness inside the
loss (reparameterization noise, the detached latent target, the TD target,
the actor-loss weight) and compares analytic gradients with central
differences through :func:`wmaug.nn.grad_check`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .agents import AgentCheckpoint, Hyperparams, critic_loss, td3_actor_loss, td3bc_actor_loss
from .data import Batch, NormStats
from .nn import GradCheckReport, Mlp, grad_check
from .worldmodel import WorldModel, wm_loss

OBS_DIM, ACT_DIM, BATCH = 3, 2, 8


def _batch(rng: np.random.Generator) -> Batch:
    s = rng.normal(size=(BATCH, OBS_DIM))
    return Batch(s, rng.uniform(-1, 1, (BATCH, ACT_DIM)), rng.normal(size=BATCH),
                 s + 0.1 * rng.normal(size=(BATCH, OBS_DIM)), np.zeros(BATCH))


def _faulty(fn: Callable, broken: bool) -> Callable:
    if not broken:
        return fn

    def wrapped(nets, batch):
        loss, grads = fn(nets, batch)
        grads = list(grads)
        grads[0] = grads[0] * 1.01
        return loss, grads

    return wrapped


def _mlp_suite(head: str):
    def build(rng):
        net = Mlp([OBS_DIM, 6, 5, ACT_DIM], head, 1.5, rng)
        batch = _batch(rng)
        target = rng.normal(size=(BATCH, ACT_DIM))

        def loss(n, b):
            out, cache = n.forward(b.states)
            diff = out - target
            grads, _ = n.backward(cache, 2.0 * diff / diff.size)
            return float(np.mean(diff**2)), grads

        return loss, net, batch

    return build


def _wm_suite(direction: str):
    def build(rng):
        wm = WorldModel.create(OBS_DIM, ACT_DIM, hidden=6, n_layers=3, rng=rng)
        batch = _batch(rng)
        noise = rng.standard_normal((BATCH, wm.latent_dim))
        target = wm.encode(batch.next_states, mode="mean")[1]

        def loss(nets, b):
            report, grads = wm_loss(wm, b, noise=noise, kl_direction=direction,
                                    latent_target=target)
            return report.total, grads

        return loss, wm.nets, batch

    return build


def _agent(rng) -> AgentCheckpoint:
    return AgentCheckpoint.create(OBS_DIM, ACT_DIM, 1.0, Hyperparams(hidden=6),
                                  NormStats.identity(OBS_DIM), rng, "offline")


def _critic_suite(rng):
    ckpt = _agent(rng)
    batch = _batch(rng)
    y = rng.normal(size=(BATCH, 1))

    def loss(nets, b):
        value, g1, g2 = critic_loss(ckpt, b, y)
        return value, g1 + g2

    return loss, [ckpt.critic1, ckpt.critic2], batch


def _td3_actor_suite(rng):
    ckpt = _agent(rng)

    def loss(net, b):
        value, grads, _ = td3_actor_loss(ckpt, b)
        return value, grads

    return loss, ckpt.actor, _batch(rng)


def _td3bc_actor_suite(rng):
    ckpt = _agent(rng)
    batch = _batch(rng)
    lam = td3bc_actor_loss(ckpt, batch)[2]["lambda"]

    def loss(net, b):
        _, grads, info = td3bc_actor_loss(ckpt, b)
        return -lam * info["q_mean"] + info["bc"], grads

    return loss, ckpt.actor, batch


SUITES: dict[str, Callable] = {
    "mlp_linear_head": _mlp_suite("linear"),
    "mlp_tanh_head": _mlp_suite("tanh"),
    "wm_loss": _wm_suite("standard"),
    "wm_loss_reverse_kl": _wm_suite("reverse"),
    "critic_td_loss": _critic_suite,
    "td3_actor_loss": _td3_actor_suite,
    "td3bc_actor_loss": _td3bc_actor_suite,
}


def run_grad_checks(
    seed: int = 0, tolerance: float = 1e-4, broken: str | None = None
) -> list[GradCheckReport]:
    """Run every suite; ``broken`` names one suite whose gradient is corrupted.

    The corruption hook exists so the failure path can be exercised.
    """
    reports = []
    for k, (name, build) in enumerate(SUITES.items()):
        loss, nets, batch = build(np.random.default_rng([seed, k]))
        reports.append(grad_check(_faulty(loss, broken == name), nets, batch,
                                  tolerance=tolerance, name=name))
    return reports

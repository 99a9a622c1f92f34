"""Variational world model with a residual latent transition head.

The encoder maps a state to the mean and log-variance of a diagonal
Gaussian over a latent code ``z``.  The transition head predicts a latent
change from ``z`` and the action, and the next latent is ``z + delta``.
The decoder maps latents back to state space.  Training minimises::

    MSE(decode(z_t), s_t) + KL(q(z|s_t) || N(0, I))
        + MSE(decode(z_t + delta), s_{t+1})
        + MSE(z_t + delta, mean_encoder(s_{t+1}))

where the last target is held constant.  Only one-step prediction is
offered; nothing here feeds a generated state back into the model.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import Reader
from .data import Batch, NormStats, OfflineDataset, sample_batch
from .errors import FormatError, NumericError, TrainingError, UsageError
from .nn import AdamConfig, Mlp, adam_step, net_from_reader, net_to_bytes

WMCK_MAGIC = b"WMCK"
WMCK_VERSION = 1

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0


def kl_to_standard_normal(mu: np.ndarray, log_var: np.ndarray) -> float:
    """``KL(N(mu, sigma^2) || N(0, I))``, summed over dims, averaged over the batch."""
    mu = np.atleast_2d(mu)
    log_var = np.atleast_2d(log_var)
    return float(np.mean(0.5 * np.sum(mu**2 + np.exp(log_var) - log_var - 1.0, axis=1)))


def kl_from_standard_normal(mu: np.ndarray, log_var: np.ndarray) -> float:
    """``KL(N(0, I) || N(mu, sigma^2))``, the reversed argument order."""
    mu = np.atleast_2d(mu)
    log_var = np.atleast_2d(log_var)
    return float(np.mean(0.5 * np.sum(np.exp(-log_var) * (1.0 + mu**2) - 1.0 + log_var, axis=1)))


def _kl_and_grads(mu, log_var, direction):
    batch = mu.shape[0]
    if direction == "standard":
        value = kl_to_standard_normal(mu, log_var)
        return value, mu / batch, 0.5 * (np.exp(log_var) - 1.0) / batch
    if direction == "reverse":
        value = kl_from_standard_normal(mu, log_var)
        inv = np.exp(-log_var)
        return value, mu * inv / batch, 0.5 * (1.0 - inv * (1.0 + mu**2)) / batch
    raise UsageError(f"unknown KL direction {direction!r}")


@dataclass
class WmLossReport:
    total: float
    recon_elbo: float
    kl: float
    state_recon: float
    latent_recon: float


@dataclass
class WorldModel:
    encoder: Mlp
    decoder: Mlp
    transition: Mlp
    latent_dim: int
    trained_on_normalized: bool = True
    norm_stats: NormStats | None = None

    @classmethod
    def create(
        cls,
        obs_dim: int,
        act_dim: int,
        latent_dim: int | None = None,
        hidden: int = 512,
        n_layers: int = 4,
        rng: np.random.Generator | None = None,
        trained_on_normalized: bool = True,
    ) -> "WorldModel":
        """Fresh model; ``n_layers`` counts affine layers per network."""
        latent = obs_dim if latent_dim is None else int(latent_dim)
        mid = [hidden] * (n_layers - 1)
        return cls(
            encoder=Mlp([obs_dim, *mid, 2 * latent], rng=rng),
            decoder=Mlp([latent, *mid, obs_dim], rng=rng),
            transition=Mlp([latent + act_dim, *mid, latent], rng=rng),
            latent_dim=latent,
            trained_on_normalized=trained_on_normalized,
        )

    def __post_init__(self):
        L = self.latent_dim
        if self.encoder.out_dim != 2 * L or self.decoder.in_dim != L:
            raise UsageError("encoder/decoder heads inconsistent with latent_dim")
        if self.transition.out_dim != L or self.transition.in_dim <= L:
            raise UsageError("transition head inconsistent with latent_dim")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise UsageError("decoder output must match encoder input")

    @property
    def obs_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def act_dim(self) -> int:
        return self.transition.in_dim - self.latent_dim

    @property
    def nets(self) -> list[Mlp]:
        return [self.encoder, self.decoder, self.transition]

    def copy(self) -> "WorldModel":
        return WorldModel(self.encoder.copy(), self.decoder.copy(), self.transition.copy(),
                          self.latent_dim, self.trained_on_normalized, self.norm_stats)

    def split_encoding(self, enc_out: np.ndarray):
        mu = enc_out[:, : self.latent_dim]
        raw = enc_out[:, self.latent_dim:]
        return mu, np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX), raw

    def encode(self, states, rng: np.random.Generator | None = None, mode: str = "sample"):
        """Return ``(z, mu, log_var)``; ``mode`` is ``"sample"`` or ``"mean"``."""
        mu, log_var, _ = self.split_encoding(self.encoder(states))
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
            raise NumericError("non-finite encoder output")
        if mode == "mean":
            return mu.copy(), mu, log_var
        if mode != "sample":
            raise UsageError(f"unknown encode mode {mode!r}")
        if rng is None:
            raise UsageError("sample mode needs an rng")
        eps = rng.standard_normal(mu.shape)
        return mu + np.exp(0.5 * log_var) * eps, mu, log_var

    def decode(self, z) -> np.ndarray:
        return self.decoder(z)

    def predict_next_latent(self, z, actions) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z + self.transition(np.hstack([z, actions]))

    def generate_next_state(
        self, states, actions, rng=None, mode: str = "sample", normalized: bool = True
    ) -> np.ndarray:
        """One-step next-state prediction in the space the model was trained in."""
        if normalized != self.trained_on_normalized:
            raise UsageError("state space does not match the world model's training space")
        z, _, _ = self.encode(states, rng, mode)
        return self.decode(self.predict_next_latent(z, actions))


def wm_loss(
    wm: WorldModel,
    batch: Batch,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    weights=(1.0, 1.0, 1.0, 1.0),
    kl_direction: str = "standard",
    compute_grads: bool = True,
    latent_target: np.ndarray | None = None,
):
    """Composite loss and its gradients.

    Args:
        noise: Reparameterization noise of shape ``(B, latent_dim)``; drawn
            from ``rng`` when omitted.  Pass it explicitly to freeze the loss.
        weights: Multipliers for (reconstruction, KL, next-state, latent).
        latent_target: Fixed target for the latent term; defaults to the
            encoder mean of the next states.  Finite-difference checks pass
            it so the detached branch stays detached under perturbation.

    Returns:
        ``(report, grads)`` where ``grads`` lists encoder, decoder and
        transition gradients in parameter order (``None`` if not requested).
    """
    s, a, s_next = batch.states, batch.actions, batch.next_states
    B = s.shape[0]
    L = wm.latent_dim
    w_rec, w_kl, w_s, w_z = weights
    if noise is None:
        if rng is None:
            raise UsageError("wm_loss needs rng or noise")
        noise = rng.standard_normal((B, L))

    enc_out, enc_cache = wm.encoder.forward(s)
    mu, log_var, raw = wm.split_encoding(enc_out)
    std = np.exp(0.5 * log_var)
    z = mu + std * noise

    rec_t, dec_cache_t = wm.decoder.forward(z)
    diff_t = rec_t - s
    recon = float(np.mean(diff_t**2))
    kl, d_mu_kl, d_lv_kl = _kl_and_grads(mu, log_var, kl_direction)

    delta, trans_cache = wm.transition.forward(np.hstack([z, a]))
    z_pred = z + delta
    rec_n, dec_cache_n = wm.decoder.forward(z_pred)
    diff_n = rec_n - s_next
    state_recon = float(np.mean(diff_n**2))

    z_target = wm.encoder(s_next)[:, :L] if latent_target is None else latent_target  # held constant
    diff_z = z_pred - z_target
    latent_recon = float(np.mean(diff_z**2))

    total = w_rec * recon + w_kl * kl + w_s * state_recon + w_z * latent_recon
    if not np.isfinite(total):
        raise NumericError("world-model loss is not finite")
    report = WmLossReport(total, recon, kl, state_recon, latent_recon)
    if not compute_grads:
        return report, None

    D = s.shape[1]
    g_dec_n, d_zpred = wm.decoder.backward(dec_cache_n, w_s * 2.0 * diff_n / (B * D))
    d_zpred = d_zpred + w_z * 2.0 * diff_z / (B * L)
    g_trans, d_x = wm.transition.backward(trans_cache, d_zpred)
    d_z = d_zpred + d_x[:, :L]
    g_dec_t, d_z_rec = wm.decoder.backward(dec_cache_t, w_rec * 2.0 * diff_t / (B * D))
    d_z = d_z + d_z_rec

    d_mu = d_z + w_kl * d_mu_kl
    d_lv = d_z * noise * 0.5 * std + w_kl * d_lv_kl
    d_lv = d_lv * ((raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX))
    g_enc, _ = wm.encoder.backward(enc_cache, np.hstack([d_mu, d_lv]))
    g_dec = [g1 + g2 for g1, g2 in zip(g_dec_t, g_dec_n)]
    return report, g_enc + g_dec + g_trans


@dataclass
class WmTrainConfig:
    iterations: int = 20_000
    batch_size: int = 256
    seed: int = 0
    learning_rate: float = 3e-4
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    kl_direction: str = "standard"
    log_every: int = 100


@dataclass
class WmTrainResult:
    model: WorldModel
    curve: list = field(default_factory=list)  # (iteration, WmLossReport)


def normalized_copy(dataset: OfflineDataset, norm: NormStats) -> Batch:
    b = dataset.as_batch()
    return Batch(norm.normalize(b.states), b.actions, b.rewards,
                 norm.normalize(b.next_states), b.dones)


def train_world_model(
    wm: WorldModel, dataset: OfflineDataset, norm_stats: NormStats, config: WmTrainConfig
) -> WmTrainResult:
    """Seeded minibatch Adam on normalized states; updates ``wm`` in place."""
    if len(dataset) == 0:
        raise UsageError("empty dataset")
    data = normalized_copy(dataset, norm_stats)
    rng = np.random.default_rng(config.seed)
    adam = AdamConfig(learning_rate=config.learning_rate)
    wm.trained_on_normalized = True
    wm.norm_stats = norm_stats
    result = WmTrainResult(wm)
    sizes = [len(n.params) for n in wm.nets]
    for it in range(config.iterations):
        batch = sample_batch(data, config.batch_size, rng)
        try:
            report, grads = wm_loss(wm, batch, rng, weights=config.weights,
                                    kl_direction=config.kl_direction)
        except NumericError as exc:
            raise TrainingError(f"world-model training diverged at iteration {it}: {exc}") from exc
        if it % config.log_every == 0:
            result.curve.append((it, report))
        start = 0
        for net, n in zip(wm.nets, sizes):
            try:
                adam_step(net, grads[start:start + n], adam)
            except NumericError as exc:
                raise TrainingError(f"world-model training diverged at iteration {it}: {exc}") from exc
            start += n
    return result


def one_step_mse(wm: WorldModel, dataset: OfflineDataset, norm: NormStats) -> tuple[float, float]:
    """Mean-mode one-step MSE and the next-state variance, both in normalized space."""
    data = normalized_copy(dataset, norm)
    pred = wm.generate_next_state(data.states, data.actions, mode="mean")
    mse = float(np.mean((pred - data.next_states) ** 2))
    return mse, float(np.mean(np.var(data.next_states, axis=0)))


# -- checkpoint -----------------------------------------------------------


def norm_stats_to_bytes(norm: NormStats | None) -> bytes:
    if norm is None:
        return struct.pack("<B", 0)
    d = len(norm.mean)
    return (struct.pack("<BI", 1, d) + np.asarray(norm.mean, "<f8").tobytes()
            + np.asarray(norm.std, "<f8").tobytes() + struct.pack("<d", norm.epsilon))


def norm_stats_from_reader(r: Reader) -> NormStats | None:
    (present,) = r.unpack("<B")
    if not present:
        return None
    (d,) = r.unpack("<I")
    mean = r.floats(d)
    std = r.floats(d)
    (eps,) = r.unpack("<d")
    return NormStats(mean, std, eps)


def world_model_to_bytes(wm: WorldModel) -> bytes:
    buf = io.BytesIO()
    buf.write(WMCK_MAGIC)
    buf.write(struct.pack("<IIB", WMCK_VERSION, wm.latent_dim, int(wm.trained_on_normalized)))
    buf.write(norm_stats_to_bytes(wm.norm_stats))
    for net in wm.nets:
        buf.write(net_to_bytes(net))
    return buf.getvalue()


def world_model_from_bytes(data: bytes, what: str = "world model") -> WorldModel:
    r = Reader(data, what=what)
    if r.take(4) != WMCK_MAGIC:
        raise FormatError(f"{what}: bad magic at offset 0")
    version, latent, flag = r.unpack("<IIB")
    if version != WMCK_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at offset 4")
    norm = norm_stats_from_reader(r)
    enc, dec, trans = (net_from_reader(r) for _ in range(3))
    if r.offset != len(data):
        raise FormatError(f"{what}: trailing bytes at offset {r.offset}")
    return WorldModel(enc, dec, trans, latent, bool(flag), norm)


def save_world_model(wm: WorldModel, path) -> None:
    Path(path).write_bytes(world_model_to_bytes(wm))


def load_world_model(path) -> WorldModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read world model {path}: {exc}") from exc
    return world_model_from_bytes(data, what=str(path))

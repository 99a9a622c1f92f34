"""Dense multilayer perceptrons with hand-written backprop and Adam.

Everything runs in float64.  A network is a flat list of parameters
``[W0, b0, W1, b1, ...]`` with ``W_i`` of shape ``(fan_in, fan_out)``, so a
batch ``x`` of shape ``(B, fan_in)`` maps to ``x @ W_i + b_i``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ._binio import Reader
from .errors import FormatError, NumericError, ShapeError, UsageError

NN_MAGIC = b"WMNN"
NN_VERSION = 1

_HIDDEN_TAGS = {"relu": 0}
_OUTPUT_TAGS = {"linear": 0, "tanh": 1}


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise UsageError(f"{name} must lie in [0, 1), got {b}")
        if not self.epsilon > 0:
            raise UsageError(f"epsilon must be > 0, got {self.epsilon}")


class ForwardCache(NamedTuple):
    owner: int
    version: int
    layer_inputs: list  # input to every affine layer; hidden ones are post-ReLU
    head: np.ndarray | None  # tanh(pre-activation) for tanh heads


class Mlp:
    """Feed-forward network: ReLU hidden layers and a linear or scaled-tanh head.

    Args:
        layer_sizes: ``(in, hidden..., out)``; at least two entries.
        output_activation: ``"linear"`` or ``"tanh"``; the tanh head is
            multiplied by ``output_scale``.
        output_scale: Bound of the tanh head (action bound for actors).
        rng: Generator used for the uniform ``±1/sqrt(fan_in)`` init.  When
            omitted all parameters start at zero.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        output_activation: str = "linear",
        output_scale: float = 1.0,
        rng: np.random.Generator | None = None,
    ):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {layer_sizes!r}")
        if output_activation not in _OUTPUT_TAGS:
            raise UsageError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = sizes
        self.hidden_activation = "relu"
        self.output_activation = output_activation
        self.output_scale = float(output_scale)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.params += [w, b]
        self.adam_m = [np.zeros_like(p) for p in self.params]
        self.adam_v = [np.zeros_like(p) for p in self.params]
        self.adam_step = 0
        self._version = 0

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[1::2]

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"layers[{i}].weight", f"layers[{i}].bias"]
        return names

    def touch(self) -> None:
        """Mark parameters as modified so outstanding caches become stale."""
        self._version += 1

    def same_architecture(self, other: "Mlp") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.output_activation == other.output_activation
            and self.output_scale == other.output_scale
        )

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.layer_sizes = self.layer_sizes
        new.hidden_activation = self.hidden_activation
        new.output_activation = self.output_activation
        new.output_scale = self.output_scale
        new.params = [p.copy() for p in self.params]
        new.adam_m = [m.copy() for m in self.adam_m]
        new.adam_v = [v.copy() for v in self.adam_v]
        new.adam_step = self.adam_step
        new._version = 0
        return new

    def load_params_from(self, other: "Mlp") -> None:
        """Copy parameter values (not optimizer state) from ``other``."""
        if not self.same_architecture(other):
            raise ShapeError("architecture mismatch")
        for p, q in zip(self.params, other.params):
            p[...] = q
        self.touch()

    def reset_optimizer(self) -> None:
        for m, v in zip(self.adam_m, self.adam_v):
            m.fill(0.0)
            v.fill(0.0)
        self.adam_step = 0

    # -- forward / backward ---------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"expected input of shape (batch, {self.in_dim}), got {x.shape}"
            )
        return x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = self._check_input(x)
        layer_inputs = []
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            layer_inputs.append(h)
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.maximum(h, 0.0)
        head = None
        if self.output_activation == "tanh":
            head = np.tanh(h)
            h = self.output_scale * head
        return h, ForwardCache(id(self), self._version, layer_inputs, head)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: ForwardCache, grad_out: np.ndarray, need_params: bool = True
    ) -> tuple[list[np.ndarray] | None, np.ndarray]:
        """Backpropagate ``grad_out`` (dL/d output) through the cached pass.

        Returns:
            ``(param_grads, input_grad)``; ``param_grads`` mirrors
            :attr:`params` and is ``None`` when ``need_params`` is false.
        """
        if cache.owner != id(self) or cache.version != self._version:
            raise UsageError("stale or foreign forward cache")
        g = np.asarray(grad_out, dtype=np.float64)
        batch = cache.layer_inputs[0].shape[0]
        if g.shape != (batch, self.out_dim):
            raise ShapeError(f"output gradient shape {g.shape} != {(batch, self.out_dim)}")
        if cache.head is not None:
            g = g * (self.output_scale * (1.0 - cache.head**2))
        grads: list[np.ndarray] | None = [None] * len(self.params) if need_params else None
        for i in reversed(range(self.n_layers)):
            a = cache.layer_inputs[i]
            if grads is not None:
                grads[2 * i] = a.T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * (a > 0.0)
        return grads, g


def adam_step(net: Mlp, grads: Sequence[np.ndarray], config: AdamConfig) -> Mlp:
    """Bias-corrected Adam update applied in place."""
    if len(grads) != len(net.params):
        raise ShapeError("gradient list does not mirror parameters")
    names = net.param_names()
    for name, p, g in zip(names, net.params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    net.adam_step += 1
    t = net.adam_step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(net.params, grads, net.adam_m, net.adam_v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    net.touch()
    return net


def polyak_update(target: Mlp, source: Mlp, tau: float) -> Mlp:
    """``target <- tau * source + (1 - tau) * target``, element-wise."""
    if not 0.0 <= tau <= 1.0:
        raise UsageError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_architecture(source):
        raise ShapeError("polyak_update: architecture mismatch")
    for t, s in zip(target.params, source.params):
        t *= 1.0 - tau
        t += tau * s
    target.touch()
    return target


# -- gradient checking ----------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_param: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a| + |n|, floor)``; the floor absorbs FD roundoff near zero."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def grad_check(
    loss_function: Callable,
    nets: Mlp | Sequence[Mlp],
    input_batch,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    name: str = "loss",
) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter.

    ``loss_function(nets, input_batch)`` must return ``(loss, grads)`` where
    ``grads`` lists gradients for the parameters of ``nets`` in order, and
    must be deterministic (freeze any noise inside ``input_batch``).
    """
    net_list = [nets] if isinstance(nets, Mlp) else list(nets)
    _, analytic = loss_function(nets, input_batch)
    analytic = list(analytic)
    labels = []
    params = []
    for k, net in enumerate(net_list):
        for pname, p in zip(net.param_names(), net.params):
            labels.append(f"net{k}.{pname}")
            params.append((net, p))
    if len(analytic) != len(params):
        raise ShapeError("loss_function returned the wrong number of gradients")

    worst, worst_label, count = 0.0, "", 0
    for label, (net, p), a in zip(labels, params, analytic):
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            net.touch()
            up = float(loss_function(nets, input_batch)[0])
            flat[j] = orig - h
            net.touch()
            down = float(loss_function(nets, input_batch)[0])
            flat[j] = orig
            net.touch()
            nflat[j] = (up - down) / (2.0 * h)
        err = float(relative_error(np.asarray(a), numeric).max()) if p.size else 0.0
        count += p.size
        if err > worst or not worst_label:
            worst, worst_label = err, label
    return GradCheckReport(name, worst, worst_label, count, tolerance)


# -- serialization --------------------------------------------------------


def _write_u32(buf, value: int) -> None:
    buf.write(struct.pack("<I", value))


def net_to_bytes(net: Mlp, include_adam: bool = True) -> bytes:
    buf = io.BytesIO()
    buf.write(NN_MAGIC)
    _write_u32(buf, NN_VERSION)
    _write_u32(buf, len(net.layer_sizes))
    for s in net.layer_sizes:
        _write_u32(buf, s)
    buf.write(struct.pack("<BBd", _HIDDEN_TAGS[net.hidden_activation],
                          _OUTPUT_TAGS[net.output_activation], net.output_scale))
    for p in net.params:
        buf.write(p.astype("<f8").tobytes())
    buf.write(struct.pack("<B", 1 if include_adam else 0))
    if include_adam:
        buf.write(struct.pack("<Q", net.adam_step))
        for arr in net.adam_m + net.adam_v:
            buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def net_from_reader(reader: Reader) -> Mlp:
    start = reader.offset
    if reader.take(4) != NN_MAGIC:
        raise FormatError(f"bad network magic at offset {start}")
    (version,) = reader.unpack("<I")
    if version != NN_VERSION:
        raise FormatError(f"unsupported network version {version} at offset {start + 4}")
    (n_sizes,) = reader.unpack("<I")
    sizes = reader.unpack(f"<{n_sizes}I")
    hidden_tag, out_tag, scale = reader.unpack("<BBd")
    out_act = {v: k for k, v in _OUTPUT_TAGS.items()}.get(out_tag)
    if hidden_tag != 0 or out_act is None:
        raise FormatError(f"unknown activation tags at offset {reader.offset - 10}")
    net = Mlp(sizes, output_activation=out_act, output_scale=scale)
    for p in net.params:
        p[...] = reader.floats(p.size).reshape(p.shape)
    (has_adam,) = reader.unpack("<B")
    if has_adam:
        (net.adam_step,) = reader.unpack("<Q")
        for arr in net.adam_m + net.adam_v:
            arr[...] = reader.floats(arr.size).reshape(arr.shape)
    return net


def net_from_bytes(data: bytes) -> Mlp:
    reader = Reader(data, what="network")
    net = net_from_reader(reader)
    if reader.offset != len(data):
        raise FormatError(f"network: trailing bytes at offset {reader.offset}")
    return net

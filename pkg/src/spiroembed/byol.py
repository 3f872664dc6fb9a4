"""BYOL-style pretraining of the spirogram encoder.

The online network (encoder, projector, predictor; parameters theta) learns to
predict the target network's projection (encoder, projector; parameters xi) of
a differently augmented view of the same curve. Only theta receives gradients;
xi follows theta by an exponential moving average. After pretraining only the
online encoder is kept.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .augment import AugmentDistribution, sample_pair
from .exceptions import FormatError, NumericError, ParameterError, ShapeError
from .spiro import CURVE_LENGTH, FlowVolumeCurve

log = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder."
PROJECTOR_PREFIX = "projector."
PREDICTOR_PREFIX = "predictor."


@dataclass(frozen=True)
class EncoderSpec:
    """Conv encoder: three stride-2 conv blocks, flatten, dense to mean and log-variance heads."""

    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 5
    stride: int = 2
    latent_dim: int = 8
    in_channels: int = 2
    input_length: int = CURVE_LENGTH

    def build(self) -> nn.Network:
        layers = []
        for ch in self.channels:
            layers += [nn.conv1d(ch, self.kernel, self.stride), nn.layer_norm(), nn.relu()]
        layers += [nn.flatten(), nn.dense(2 * self.latent_dim)]
        return nn.Network(layers, (self.input_length, self.in_channels), ENCODER_PREFIX)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**{**d, "channels": tuple(d["channels"])})


def mlp_head(in_dim: int, hidden: int, out_dim: int, prefix: str) -> nn.Network:
    return nn.Network([nn.dense(hidden), nn.layer_norm(), nn.relu(), nn.dense(out_dim)], (in_dim,), prefix)


@dataclass(frozen=True)
class SlseConfig:
    tau: float = 0.99
    lr: float = 1e-3
    batch_size: int = 64
    total_steps: int = 300
    seed: int = 0
    projector_hidden: int = 64
    projection_dim: int = 32
    predictor_hidden: int = 64
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    augment: AugmentDistribution = field(default_factory=AugmentDistribution.default)
    augment_prime: AugmentDistribution = field(default_factory=AugmentDistribution.default)

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ParameterError("tau must lie in [0, 1]")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ParameterError("total_steps and batch_size must be positive")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")


class OnlineNetwork:
    def __init__(self, config: SlseConfig, rng: np.random.Generator):
        latent = config.encoder.latent_dim
        self.latent_dim = latent
        self.encoder = config.encoder.build()
        self.projector = mlp_head(latent, config.projector_hidden, config.projection_dim, PROJECTOR_PREFIX)
        self.predictor = mlp_head(
            config.projection_dim, config.predictor_hidden, config.projection_dim, PREDICTOR_PREFIX
        )
        self.params = nn.ParameterSet()
        for net in (self.encoder, self.projector, self.predictor):
            net.init_params(rng, self.params)


class TargetNetwork:
    """Encoder and projector shadowing the online network; never trained directly."""

    def __init__(self, online: OnlineNetwork):
        self.latent_dim = online.latent_dim
        self.encoder = online.encoder
        self.projector = online.projector
        self.params = online.params.subset((ENCODER_PREFIX, PROJECTOR_PREFIX))


def byol_loss(q_pred, z_target) -> float:
    """2 - 2 cos(q, z); rows are averaged when given batches."""
    q = nn.l2_normalize(q_pred)
    z = nn.l2_normalize(z_target)
    cos = np.sum(q * z, axis=-1)
    return float(np.mean(2.0 - 2.0 * cos))


def byol_loss_grad(q_pred, z_target) -> np.ndarray:
    """Gradient of the (batch-mean) loss with respect to ``q_pred``; ``z_target`` is a constant."""
    q_pred = np.atleast_2d(np.asarray(q_pred, dtype=np.float64))
    qn = np.linalg.norm(q_pred, axis=-1, keepdims=True)
    if np.any(qn == 0):
        raise NumericError("cannot normalize a zero vector")
    q = q_pred / qn
    z = nn.l2_normalize(np.atleast_2d(z_target))
    cos = np.sum(q * z, axis=-1, keepdims=True)
    return -2.0 * (z - cos * q) / qn / q_pred.shape[0]


def ema_update(xi: nn.ParameterSet, theta: nn.ParameterSet, tau: float) -> None:
    """xi <- tau * xi + (1 - tau) * theta for every parameter held by ``xi``."""
    for name, value in xi.values.items():
        if name not in theta:
            raise ShapeError(f"online network lacks parameter {name}")
        if theta[name].shape != value.shape:
            raise ShapeError(f"shape mismatch for {name}")
        value[...] = tau * value + (1.0 - tau) * theta[name]
    xi.mark_mutated()


def curves_to_batch(curves: Sequence[FlowVolumeCurve]) -> np.ndarray:
    return np.stack([c.as_input() for c in curves])


def byol_objective(online: OnlineNetwork, target: TargetNetwork, x1, x2) -> float:
    """Loss on fixed views with gradients accumulated into ``online.params`` only."""
    h, enc_tape = nn.forward(online.encoder, online.params, x1)
    y = h[:, : online.latent_dim]
    z, proj_tape = nn.forward(online.projector, online.params, y)
    q, pred_tape = nn.forward(online.predictor, online.params, z)

    ht, _ = nn.forward(target.encoder, target.params, x2)
    zt, _ = nn.forward(target.projector, target.params, ht[:, : target.latent_dim])

    loss = byol_loss(q, zt)
    dz = nn.backward(pred_tape, byol_loss_grad(q, zt))
    dy = nn.backward(proj_tape, dz)
    dh = np.zeros_like(h)
    dh[:, : online.latent_dim] = dy
    nn.backward(enc_tape, dh)
    return loss


def train_step(
    batch: Sequence[FlowVolumeCurve],
    online: OnlineNetwork,
    target: TargetNetwork,
    config: SlseConfig,
    rng: np.random.Generator,
) -> float:
    """Augment, update theta with Adam, then move xi toward the new theta."""
    if not batch:
        raise ParameterError("empty batch")
    pairs = [sample_pair(c, config.augment, config.augment_prime, rng) for c in batch]
    x1 = curves_to_batch([a for a, _ in pairs])
    x2 = curves_to_batch([b for _, b in pairs])
    online.params.zero_grad()
    loss = byol_objective(online, target, x1, x2)
    nn.adam_step(online.params, lr=config.lr)
    ema_update(target.params, online.params, config.tau)
    return loss


@dataclass
class EncoderCheckpoint:
    spec: EncoderSpec
    params: nn.ParameterSet
    seed: int = 0
    step: int = 0
    losses: list[float] = field(default_factory=list)

    @property
    def network(self) -> nn.Network:
        return self.spec.build()

    def save(self, path, extra: dict | None = None) -> None:
        header = {
            "kind": "encoder",
            "encoder_spec": self.spec.to_dict(),
            "network": self.network.to_dict(),
            "seed": self.seed,
            "step": self.step,
        }
        header.update(extra or {})
        nn.save_checkpoint(path, self.params, header, names=list(self.network.param_shapes()))

    @classmethod
    def load(cls, path) -> "EncoderCheckpoint":
        params, header = nn.load_checkpoint(path)
        if header.get("kind") != "encoder":
            raise FormatError(f"{path} is not an encoder checkpoint")
        spec = EncoderSpec.from_dict(header["encoder_spec"])
        expected = spec.build().param_shapes()
        got = {n: params[n].shape for n in params.names()}
        if got != expected or spec.build().to_dict() != header["network"]:
            raise FormatError("checkpoint parameters do not match its encoder spec")
        return cls(spec, params, header.get("seed", 0), header.get("step", 0))


def pretrain(curves: Sequence[FlowVolumeCurve], config: SlseConfig = SlseConfig()) -> EncoderCheckpoint:
    """Run ``config.total_steps`` BYOL steps on unlabeled curves.

    Batches are drawn uniformly with replacement. Returns the online encoder
    together with the per-step loss trace.
    """
    if len(curves) == 0:
        raise ParameterError("pretraining needs at least one curve")
    rng = np.random.default_rng(config.seed)
    online = OnlineNetwork(config, rng)
    target = TargetNetwork(online)
    losses = []
    batch_size = min(config.batch_size, len(curves))
    for step in range(config.total_steps):
        idx = rng.integers(0, len(curves), size=batch_size)
        loss = train_step([curves[i] for i in idx], online, target, config, rng)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        losses.append(loss)
        if step % 50 == 0 or step == config.total_steps - 1:
            log.info("pretrain step %d loss %.5f", step, loss)
    encoder_params = online.params.subset((ENCODER_PREFIX,))
    return EncoderCheckpoint(config.encoder, encoder_params, config.seed, config.total_steps, losses)


def embed(checkpoint: EncoderCheckpoint, curves, batch_size: int = 256) -> np.ndarray:
    """Mean-head representation of unaugmented curves.

    A single curve gives a vector of length ``latent_dim``; a sequence gives
    one row per curve.
    """
    single = isinstance(curves, FlowVolumeCurve)
    curves = [curves] if single else list(curves)
    net = checkpoint.network
    latent = checkpoint.spec.latent_dim
    rows = []
    for start in range(0, len(curves), batch_size):
        h, _ = nn.forward(net, checkpoint.params, curves_to_batch(curves[start : start + batch_size]))
        rows.append(h[:, :latent])
    out = np.concatenate(rows) if rows else np.zeros((0, latent))
    return out[0] if single else out

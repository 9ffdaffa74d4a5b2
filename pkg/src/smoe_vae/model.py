"""Sparse mixture-of-experts VAE: shared conv encoder, latent gating MLP, E decoder experts."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import (Conv2d, ConvTranspose2d, Dense, DimensionError, Param, ReLU, Reshape,
                       Sequential, Sigmoid, make_rng, softmax_rows, spawn_rng)

UNSUPERVISED = "unsupervised"
SUPERVISED_ORACLE = "supervised-oracle"
SUPERVISED_GATE = "supervised-gate"
ROUTING_MODES = (UNSUPERVISED, SUPERVISED_ORACLE, SUPERVISED_GATE)

LOGVAR_CLAMP = 10.0
SUPERVISED_MARGIN = 10.0


class LabelError(ValueError):
    pass


@dataclass
class ModelConfig:
    latent_dim: int = 32
    num_experts: int = 1
    image_side: int = 28
    enc_channels: tuple = (32, 64)
    enc_hidden: int = 256
    dec_hidden: int = 128
    dec_channels: tuple = (16, 8)
    gate_hidden: tuple = (64, 32)

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.dec_channels = tuple(self.dec_channels)
        self.gate_hidden = tuple(self.gate_hidden)
        if self.latent_dim < 1 or self.num_experts < 1:
            raise ValueError("latent_dim and num_experts must be >= 1")
        if self.image_side % 4:
            raise ValueError("image_side must be divisible by 4 (two stride-2 stages)")
        if len(self.enc_channels) != 2 or len(self.dec_channels) != 2 or len(self.gate_hidden) != 2:
            raise ValueError("enc_channels, dec_channels and gate_hidden take two entries each")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class GateOutput:
    logits: np.ndarray
    probs: np.ndarray
    experts: np.ndarray


@dataclass
class LatentSample:
    mu: np.ndarray
    logvar: np.ndarray          # clamped
    z: np.ndarray
    noise: np.ndarray | None = None
    raw_logvar: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SoftForward:
    x_hat: np.ndarray
    gate: GateOutput
    latent: LatentSample
    expert_outputs: list
    routed: bool = False


def route_supervised(labels, num_experts, dtype=np.float32) -> GateOutput:
    """One-hot routing from class labels (the oracle baseline)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_experts):
        raise LabelError(f"labels must lie in [0, {num_experts}), got range [{labels.min()}, {labels.max()}]")
    probs = np.zeros((len(labels), num_experts), dtype=dtype)
    probs[np.arange(len(labels)), labels] = 1
    return GateOutput(SUPERVISED_MARGIN * probs, probs, labels.astype(np.int64))


def _encoder(cfg: ModelConfig, rng, dtype):
    c1, c2 = cfg.enc_channels
    side = cfg.image_side // 4
    trunk = Sequential([
        Conv2d("encoder.conv1", 1, c1, 4, 2, 1, rng, dtype, input_grad=False), ReLU(),
        Conv2d("encoder.conv2", c1, c2, 4, 2, 1, rng, dtype), ReLU(),
        Reshape((c2 * side * side,)),
        Dense("encoder.fc", c2 * side * side, cfg.enc_hidden, rng, dtype), ReLU(),
    ])
    mu = Dense("encoder.mu", cfg.enc_hidden, cfg.latent_dim, rng, dtype)
    logvar = Dense("encoder.logvar", cfg.enc_hidden, cfg.latent_dim, rng, dtype)
    return trunk, mu, logvar


def _gate(cfg: ModelConfig, rng, dtype):
    h1, h2 = cfg.gate_hidden
    return Sequential([
        Dense("gate.fc1", cfg.latent_dim, h1, rng, dtype), ReLU(),
        Dense("gate.fc2", h1, h2, rng, dtype), ReLU(),
        Dense("gate.fc3", h2, cfg.num_experts, rng, dtype),
    ])


def _decoder(cfg: ModelConfig, e, rng, dtype):
    c1, c2 = cfg.dec_channels
    side = cfg.image_side // 4
    p = f"decoders.{e}"
    return Sequential([
        Dense(f"{p}.fc1", cfg.latent_dim, cfg.dec_hidden, rng, dtype), ReLU(),
        Dense(f"{p}.fc2", cfg.dec_hidden, c1 * side * side, rng, dtype), ReLU(),
        Reshape((c1, side, side)),
        ConvTranspose2d(f"{p}.deconv1", c1, c2, 4, 2, 1, rng, dtype), ReLU(),
        ConvTranspose2d(f"{p}.deconv2", c2, 1, 4, 2, 1, rng, dtype), Sigmoid(),
    ])


class SmoeVae:
    def __init__(self, config: ModelConfig, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = make_rng(0) if rng is None else rng
        enc_rng, gate_rng, *dec_rngs = spawn_rng(rng, 2 + config.num_experts)
        self.trunk, self.mu_head, self.logvar_head = _encoder(config, enc_rng, dtype)
        self.gate_net = _gate(config, gate_rng, dtype)
        self.decoders = [_decoder(config, e, r, dtype) for e, r in enumerate(dec_rngs)]
        self.decoder_evals = 0

    # -- parameters ---------------------------------------------------------
    @property
    def encoder_params(self) -> list[Param]:
        return self.trunk.params + self.mu_head.params + self.logvar_head.params

    @property
    def gate_params(self) -> list[Param]:
        return self.gate_net.params

    def decoder_params(self, e) -> list[Param]:
        return self.decoders[e].params

    def params(self) -> list[Param]:
        out = self.encoder_params + self.gate_params
        for d in self.decoders:
            out += d.params
        return out

    def n_params(self, params=None):
        return sum(p.value.size for p in (self.params() if params is None else params))

    def state_dict(self):
        return {p.name: p.value for p in self.params()}

    def load_state_dict(self, state):
        for p in self.params():
            if state[p.name].shape != p.value.shape:
                raise DimensionError(f"{p.name}: stored shape {state[p.name].shape} != {p.value.shape}")
            p.value[...] = state[p.name]

    def astype(self, dtype) -> "SmoeVae":
        other = SmoeVae(self.config, make_rng(0), dtype)
        other.load_state_dict(self.state_dict())
        return other

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    # -- forward pieces -----------------------------------------------------
    def _check_images(self, x):
        s = self.config.image_side
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise DimensionError(f"expected images of shape N x 1 x {s} x {s}, got {x.shape}")

    def encode(self, x):
        self._check_images(x)
        h = self.trunk.forward(x.astype(self.dtype, copy=False))
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    def reparameterize(self, mu, logvar, rng=None) -> LatentSample:
        """Sample z; ``rng=None`` is evaluation mode and returns z = mu."""
        if mu.shape != logvar.shape:
            raise DimensionError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
        lv = np.clip(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        if rng is None:
            return LatentSample(mu, lv, mu, None, logvar)
        noise = rng.standard_normal(mu.shape).astype(self.dtype)
        z = mu + np.exp(0.5 * lv) * noise
        return LatentSample(mu, lv, z, noise, logvar)

    def gate(self, z) -> GateOutput:
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise DimensionError(f"expected latent of width {self.config.latent_dim}, got {z.shape}")
        logits = self.gate_net.forward(z)
        return GateOutput(logits, softmax_rows(logits), np.argmax(logits, axis=1))

    def decode_one(self, e, z):
        if not 0 <= e < self.config.num_experts:
            raise IndexError(f"expert index {e} out of range [0, {self.config.num_experts})")
        self.decoder_evals += 1
        return self.decoders[e].forward(z)

    # -- full passes ----------------------------------------------------------
    def forward_soft(self, x, rng=None, route: GateOutput | None = None) -> SoftForward:
        """Probability-weighted sum over all experts.

        ``route`` replaces the gating network (supervised routing); the gate is
        then not evaluated and receives no gradient.
        """
        mu, logvar = self.encode(x)
        latent = self.reparameterize(mu, logvar, rng)
        gate = self.gate(latent.z) if route is None else route
        if gate.probs.shape != (len(x), self.config.num_experts):
            raise DimensionError(f"routing probabilities have shape {gate.probs.shape}")
        outputs = [self.decode_one(e, latent.z) for e in range(self.config.num_experts)]
        x_hat = np.zeros_like(outputs[0])
        for e, y in enumerate(outputs):
            x_hat += gate.probs[:, e].reshape(-1, 1, 1, 1).astype(self.dtype) * y
        return SoftForward(x_hat, gate, latent, outputs, routed=route is not None)

    def forward_hard(self, x, experts=None):
        """Evaluation-mode pass (z = mu); each sample uses only its argmax expert.

        ``experts`` forces the per-sample expert (supervised routing).
        Returns ``(x_hat, experts, gate_output_or_None, (mu, logvar))``.
        """
        mu, logvar = self.encode(x)
        gate = None
        if experts is None:
            gate = self.gate(mu)
            experts = gate.experts
        experts = np.asarray(experts)
        x_hat = np.empty((len(x), 1, self.config.image_side, self.config.image_side), dtype=self.dtype)
        for e in np.unique(experts):
            rows = np.flatnonzero(experts == e)
            x_hat[rows] = self.decode_one(int(e), mu[rows])
        return x_hat, experts, gate, (mu, np.clip(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP))

    # -- gradients ------------------------------------------------------------
    def backward(self, fwd: SoftForward, grads):
        """Accumulate parameter gradients given loss gradients (``losses.LossGrads``)."""
        p = fwd.gate.probs
        dxh = grads.x_hat
        dprobs = np.array(grads.probs, dtype=self.dtype)
        dz = np.zeros_like(fwd.latent.z)
        for e, y in enumerate(fwd.expert_outputs):
            dprobs[:, e] += np.sum(dxh * y, axis=(1, 2, 3))
            dz += self.decoders[e].backward(dxh * p[:, e].reshape(-1, 1, 1, 1).astype(self.dtype))
        if not fwd.routed:
            dlogits = p * (dprobs - np.sum(dprobs * p, axis=1, keepdims=True))
            dz += self.gate_net.backward(dlogits.astype(self.dtype, copy=False))
        lat = fwd.latent
        dmu = dz + grads.mu
        dlv = np.array(grads.logvar, dtype=self.dtype)
        if lat.noise is not None:
            dlv += dz * lat.noise * 0.5 * np.exp(0.5 * lat.logvar)
        dlv *= np.abs(lat.raw_logvar) <= LOGVAR_CLAMP
        dh = self.mu_head.backward(dmu.astype(self.dtype, copy=False)) + self.logvar_head.backward(dlv)
        self.trunk.backward(dh)


def init(config: ModelConfig, rng, dtype=np.float32) -> SmoeVae:
    """Kaiming-uniform weights, zero biases; each decoder gets its own sub-stream."""
    return SmoeVae(config, rng, dtype)

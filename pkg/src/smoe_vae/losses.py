"""Training objective: reconstruction + beta * KL + alpha * gating.

The gating term is ``lambda_balance * balance + lambda_entropy * entropy``.
Each sub-loss has a value function and a gradient function; the gradient
functions return derivatives of the *unweighted* sub-loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import DimensionError


@dataclass
class LossConfig:
    beta: float = 0.1
    alpha: float = 1.0
    lambda_balance: float = 200.0
    lambda_entropy: float = 400.0
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("beta", "alpha", "lambda_balance", "lambda_entropy", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    balance: float
    entropy: float
    gating: float
    total: float
    mean_probs: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        return {"recon": self.recon, "kl": self.kl, "balance": self.balance,
                "entropy": self.entropy, "gating": self.gating, "total": self.total}


@dataclass
class LossGrads:
    x_hat: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    probs: np.ndarray


def recon_mse(x, x_hat):
    """Squared error summed over pixels, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    diff = (x_hat - x).reshape(len(x), -1)
    return float(np.mean(np.sum(diff * diff, axis=1, dtype=np.float64)))


def recon_mse_grad(x, x_hat):
    return 2.0 * (x_hat - x) / len(x)


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dims, mean over batch."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    term = 1.0 + logvar - mu * mu - np.exp(logvar)
    return float(np.mean(-0.5 * np.sum(term, axis=1, dtype=np.float64)))


def kl_divergence_grad(mu, logvar):
    n = len(mu)
    return mu / n, -0.5 * (1.0 - np.exp(logvar)) / n


def balance_loss(probs):
    """E * MSE(mean expert probability, uniform)."""
    e = probs.shape[1]
    pbar = probs.mean(axis=0, dtype=np.float64)
    return float(np.sum((pbar - 1.0 / e) ** 2))


def balance_loss_grad(probs):
    n, e = probs.shape
    pbar = probs.mean(axis=0)
    g = 2.0 * (pbar - 1.0 / e) / n
    return np.broadcast_to(g, probs.shape).astype(probs.dtype)


def entropy_loss(probs, eps=1e-8):
    h = -np.sum(probs * np.log(probs + eps), axis=1, dtype=np.float64)
    return float(np.mean(h))


def entropy_loss_grad(probs, eps=1e-8):
    n = len(probs)
    return -(np.log(probs + eps) + probs / (probs + eps)) / n


def loss_breakdown(recon, kl, probs, config: LossConfig) -> LossBreakdown:
    bal = balance_loss(probs)
    ent = entropy_loss(probs, config.eps)
    gating = config.lambda_balance * bal + config.lambda_entropy * ent
    total = recon + config.beta * kl + config.alpha * gating
    return LossBreakdown(recon, kl, bal, ent, gating, total, probs.mean(axis=0, dtype=np.float64))


def total_loss(x, fwd, config: LossConfig) -> LossBreakdown:
    """Evaluate the objective on the outputs of ``SmoeVae.forward_soft``."""
    return loss_breakdown(recon_mse(x, fwd.x_hat), kl_divergence(fwd.latent.mu, fwd.latent.logvar),
                          fwd.gate.probs, config)


def total_loss_grads(x, fwd, config: LossConfig) -> LossGrads:
    """Gradients of the weighted total w.r.t. x_hat, mu, logvar and probs."""
    dmu, dlv = kl_divergence_grad(fwd.latent.mu, fwd.latent.logvar)
    probs = fwd.gate.probs
    w_bal = config.alpha * config.lambda_balance
    w_ent = config.alpha * config.lambda_entropy
    dprobs = w_bal * balance_loss_grad(probs) + w_ent * entropy_loss_grad(probs, config.eps)
    return LossGrads(recon_mse_grad(x, fwd.x_hat), config.beta * dmu, config.beta * dlv,
                     dprobs.astype(probs.dtype, copy=False))

"""Exact t-SNE (O(M^2) affinities), after van der Maaten & Hinton (2008).

Per-point Gaussian precisions are found by bisection on the conditional
entropy; affinities are symmetrized; optimization uses early exaggeration,
momentum and per-coordinate adaptive gains.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..backbone import make_rng

MAX_POINTS = 10_000


class TsneParameterError(ValueError):
    pass


@dataclass
class EmbeddingResult:
    coords: np.ndarray        # M x 2
    kl: float                 # final KL(P || Q) with unexaggerated P
    trace: np.ndarray         # KL per iteration, unexaggerated P
    indices: np.ndarray       # rows of the input that were embedded
    perplexity: float
    iters: int


def squared_distances(x):
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0)
    return np.maximum(d, 0)


def conditional_affinities(d2, perplexity, tol=1e-5, max_iter=50):
    """Row-stochastic P_{j|i}; each row's entropy matches log(perplexity) within ``tol``.

    Returns ``(P, beta, entropy_error)`` where beta = 1 / (2 sigma^2).
    """
    m = len(d2)
    target = np.log(perplexity)
    beta = np.ones(m)
    lo = np.full(m, -np.inf)
    hi = np.full(m, np.inf)
    off = ~np.eye(m, dtype=bool)
    # shift by each row's nearest-neighbour distance; P is invariant to it
    dmin = np.where(off, d2, np.inf).min(axis=1, keepdims=True)
    shifted = d2 - dmin
    active = np.ones(m, dtype=bool)
    for _ in range(max_iter):
        p = np.exp(-shifted * beta[:, None]) * off
        sum_p = p.sum(axis=1)
        h = np.log(sum_p) + beta * np.sum(shifted * p, axis=1) / sum_p
        diff = h - target
        active = np.abs(diff) > tol
        if not active.any():
            break
        up = active & (diff > 0)     # entropy too high: sharpen
        down = active & (diff <= 0)
        lo[up] = beta[up]
        beta[up] = np.where(np.isinf(hi[up]), beta[up] * 2, (beta[up] + hi[up]) / 2)
        hi[down] = beta[down]
        beta[down] = np.where(np.isinf(lo[down]), beta[down] / 2, (beta[down] + lo[down]) / 2)
    p = np.exp(-shifted * beta[:, None]) * off
    sum_p = p.sum(axis=1)
    h = np.log(sum_p) + beta * np.sum(shifted * p, axis=1) / sum_p
    return p / sum_p[:, None], beta, np.abs(h - target)


def joint_affinities(x, perplexity):
    p, _, _ = conditional_affinities(squared_distances(np.asarray(x, dtype=np.float64)), perplexity)
    p = (p + p.T) / (2 * len(p))
    return np.maximum(p, 1e-12)


def _student_t(y):
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0)
    return num


def kl_objective(p, y):
    num = _student_t(y)
    q = np.maximum(num / num.sum(), 1e-12)
    return float(np.sum(p * np.log(p / q)))


def tsne(x, perplexity=30.0, iters=1000, seed=0, learning_rate=200.0, exaggeration=12.0,
         exaggeration_iters=250, momentum=(0.5, 0.8), max_points=MAX_POINTS) -> EmbeddingResult:
    x = np.asarray(x, dtype=np.float64)
    rng = make_rng(seed)
    indices = np.arange(len(x))
    if len(x) > max_points:
        indices = np.sort(rng.choice(len(x), size=max_points, replace=False))
        x = x[indices]
    m = len(x)
    if not 0 < perplexity < m / 3:
        raise TsneParameterError(f"perplexity {perplexity} infeasible for {m} points (need 0 < perplexity < M/3)")
    p = joint_affinities(x, perplexity)
    y = rng.normal(0.0, 1e-4, size=(m, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = np.empty(iters)
    for it in range(iters):
        exag = exaggeration if it < exaggeration_iters else 1.0
        mom = momentum[0] if it < exaggeration_iters else momentum[1]
        num = _student_t(y)
        q = np.maximum(num / num.sum(), 1e-12)
        trace[it] = np.sum(p * np.log(p / q))
        w = (exag * p - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = mom * velocity - learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)
    return EmbeddingResult(y, kl_objective(p, y), trace, indices, perplexity, iters)


def write_embedding_csv(path, result: EmbeddingResult, experts, labels, class_names=None):
    """Columns x, y, expert, class; a leading comment records the t-SNE settings."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# perplexity={result.perplexity} iters={result.iters} kl={result.kl!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "expert", "class"])
        for (cx, cy), i in zip(result.coords, result.indices):
            lab = labels[i] if class_names is None else class_names[labels[i]]
            w.writerow([repr(float(cx)), repr(float(cy)), int(experts[i]), lab])

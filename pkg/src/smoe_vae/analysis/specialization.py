"""Expert assignments, utilization, linear probes, and partition agreement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..backbone import make_rng, softmax_rows
from ..data import Dataset
from ..model import UNSUPERVISED, SmoeVae
from ..training import DEAD_THRESHOLD, evaluate_full
from ..training import utilization as _utilization


class DegenerateTargetError(ValueError):
    pass


@dataclass
class AssignmentTable:
    mu: np.ndarray          # M x d
    experts: np.ndarray     # M
    labels: np.ndarray      # M
    num_experts: int

    def __post_init__(self):
        if not len(self.mu) == len(self.experts) == len(self.labels):
            raise ValueError("mu, experts and labels must align row for row")
        if len(self.experts) and (self.experts.min() < 0 or self.experts.max() >= self.num_experts):
            raise ValueError("expert index outside [0, num_experts)")

    def __len__(self):
        return len(self.experts)


def assignments(model: SmoeVae, dataset: Dataset, routing_mode=UNSUPERVISED) -> AssignmentTable:
    """Hard-gated expert index and latent mean for every sample (evaluation mode)."""
    _, experts, mu = evaluate_full(model, dataset, routing_mode)
    return AssignmentTable(mu, experts.astype(np.int64), dataset.labels.copy(), model.config.num_experts)


def utilization(table: AssignmentTable, num_experts=None, threshold=DEAD_THRESHOLD):
    """Per-expert routing fractions and the number of experts strictly below ``threshold``."""
    return _utilization(table.experts, num_experts or table.num_experts, threshold)


# ---------------------------------------------------------------------------
# linear probe

@dataclass
class ProbeResult:
    target: str
    train_accuracy: float
    test_accuracy: float
    confusion: np.ndarray    # rows: true target, cols: predicted
    classes: np.ndarray      # original target values, in confusion order

    def to_dict(self):
        return {"target": self.target, "train_accuracy": self.train_accuracy,
                "test_accuracy": self.test_accuracy, "classes": self.classes.tolist(),
                "confusion": self.confusion.tolist()}


def stratified_split(y, test_fraction, seed):
    # one label-independent permutation, so relabeling targets leaves the split unchanged
    perm = make_rng(seed).permutation(len(y))
    test = np.zeros(len(y), dtype=bool)
    for k in np.unique(y):
        members = perm[y[perm] == k]
        n_test = int(round(len(members) * test_fraction)) if len(members) > 1 else 0
        test[members[:n_test]] = True
    return np.flatnonzero(~test), np.flatnonzero(test)


def fit_softmax_regression(x, y, num_classes, lr=0.1, iters=500, l2=1e-4):
    """Full-batch gradient descent on multinomial cross-entropy + L2; returns (W, b)."""
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(iters):
        p = softmax_rows(x @ w + b)
        err = (p - onehot) / n
        w -= lr * (x.T @ err + l2 * w)
        b -= lr * err.sum(axis=0)
    return w, b


def linear_probe(table: AssignmentTable, target="expert", seed=0, lr=0.1, iters=500, l2=1e-4,
                 test_fraction=0.2) -> ProbeResult:
    """How linearly decodable expert assignments (or class labels) are from mu."""
    if target not in ("expert", "class"):
        raise ValueError(f"target must be 'expert' or 'class', got {target!r}")
    raw = table.experts if target == "expert" else table.labels
    classes, y = np.unique(raw, return_inverse=True)
    if len(classes) < 2:
        raise DegenerateTargetError(f"probe target {target!r} takes a single value")
    train_idx, test_idx = stratified_split(y, test_fraction, seed)
    x = table.mu.astype(np.float64)
    mean, std = x[train_idx].mean(axis=0), x[train_idx].std(axis=0)
    x = (x - mean) / np.where(std > 0, std, 1.0)
    w, b = fit_softmax_regression(x[train_idx], y[train_idx], len(classes), lr, iters, l2)
    pred = np.argmax(x @ w + b, axis=1)
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(confusion, (y[test_idx], pred[test_idx]), 1)
    return ProbeResult(target, float(np.mean(pred[train_idx] == y[train_idx])),
                       float(np.mean(pred[test_idx] == y[test_idx])), confusion, classes)


# ---------------------------------------------------------------------------
# agreement between the expert partition and the class partition

def contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def normalized_mutual_info(a, b):
    """Mutual information over the arithmetic mean of the two entropies."""
    c = contingency(a, b).astype(np.float64)
    n = c.sum()
    ha, hb = _entropy(c.sum(axis=1)), _entropy(c.sum(axis=0))
    if ha == 0 and hb == 0:
        return 1.0
    nz = c > 0
    outer = np.outer(c.sum(axis=1), c.sum(axis=0))
    mi = float(np.sum(c[nz] / n * np.log(c[nz] * n / outer[nz])))
    return mi / ((ha + hb) / 2)


def _pairs(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(a, b):
    c = contingency(a, b)
    n = c.sum()
    sum_ij = _pairs(c).sum()
    sum_a, sum_b = _pairs(c.sum(axis=1)).sum(), _pairs(c.sum(axis=0)).sum()
    expected = sum_a * sum_b / _pairs(n)
    maximum = (sum_a + sum_b) / 2
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def mapped_accuracy(experts, labels):
    """Accuracy under the best one-to-one matching of experts to classes.

    The matching maximizes total overlap, so ties cannot make the score
    depend on how experts happen to be numbered.
    """
    c = contingency(experts, labels)
    rows, cols = linear_sum_assignment(c, maximize=True)
    return float(c[rows, cols].sum() / c.sum())


def agreement(table: AssignmentTable) -> dict:
    return {"nmi": normalized_mutual_info(table.experts, table.labels),
            "ari": adjusted_rand_index(table.experts, table.labels),
            "mapped_accuracy": mapped_accuracy(table.experts, table.labels)}

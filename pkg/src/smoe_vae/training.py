"""Epoch loop, hard-gated evaluation, checkpoints, and metric logging.

metrics.csv columns (one row per epoch, floats written with ``repr``)::

    epoch, train_recon, train_kl, train_balance, train_entropy, train_total,
    test_recon, test_kl, test_balance, test_entropy, test_total,
    active_experts, dead_experts, utilization

``utilization`` holds the per-expert test-set routing fractions separated by
spaces. Wall-clock time goes to timing.csv (epoch, seconds) so metrics.csv
is byte-reproducible.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .backbone import Adam, make_rng
from .data import BatchPlan, Dataset, batches
from .losses import LossBreakdown, LossConfig
from .model import (ROUTING_MODES, SUPERVISED_GATE, SUPERVISED_ORACLE, UNSUPERVISED, ModelConfig,
                    SmoeVae, init, route_supervised)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SMOEVAE1"
CHECKPOINT_VERSION = 1
DEAD_THRESHOLD = 0.01
METRIC_FIELDS = ["epoch", "train_recon", "train_kl", "train_balance", "train_entropy", "train_total",
                 "test_recon", "test_kl", "test_balance", "test_entropy", "test_total",
                 "active_experts", "dead_experts", "utilization"]


class DivergedError(RuntimeError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"loss diverged ({value}) at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    routing_mode: str = UNSUPERVISED
    gate_ce_weight: float = 1.0      # supervised-gate only
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.routing_mode not in ROUTING_MODES:
            raise ValueError(f"routing_mode must be one of {ROUTING_MODES}, got {self.routing_mode!r}")

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("model", "loss")}
        d["model"] = self.model.to_dict()
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        return cls(model=model, loss=loss, **d)


@dataclass
class MetricRow:
    epoch: int
    train: dict
    test: dict
    utilization: list
    dead_experts: int
    active_experts: int
    seconds: float = 0.0

    def csv_row(self):
        row = [str(self.epoch)]
        row += [repr(float(self.train[k])) for k in ("recon", "kl", "balance", "entropy", "total")]
        row += [repr(float(self.test[k])) for k in ("recon", "kl", "balance", "entropy", "total")]
        row += [str(self.active_experts), str(self.dead_experts), " ".join(f"{u:.6f}" for u in self.utilization)]
        return row

    def to_dict(self):
        return asdict(self)


def utilization(experts, num_experts, threshold=DEAD_THRESHOLD):
    """Routing fractions per expert and the count of experts below ``threshold``."""
    counts = np.bincount(np.asarray(experts), minlength=num_experts)[:num_experts]
    fractions = counts / max(counts.sum(), 1)
    return fractions, int(np.sum(fractions < threshold))


def _routing_for(model: SmoeVae, labels, mode):
    if mode == UNSUPERVISED:
        return None
    return route_supervised(labels, model.config.num_experts, model.dtype)


def evaluate_full(model: SmoeVae, dataset: Dataset, routing_mode=UNSUPERVISED, loss_config=None,
                  batch_size=500):
    """Hard-gated evaluation; returns ``(LossBreakdown, expert per sample, mu)``."""
    loss_config = loss_config or LossConfig()
    n = len(dataset)
    recon_sum = kl_sum = 0.0
    probs_all, experts_all, mu_all = [], [], []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x = dataset.images[idx].astype(np.float32)[:, None] / np.float32(255.0)
        labels = dataset.labels[idx]
        forced = labels if routing_mode == SUPERVISED_ORACLE else None
        x_hat, experts, gate, (mu, logvar) = model.forward_hard(x, experts=forced)
        if gate is None:
            probs = route_supervised(labels, model.config.num_experts, model.dtype).probs
        else:
            probs = gate.probs
        recon_sum += losses.recon_mse(x, x_hat) * len(idx)
        kl_sum += losses.kl_divergence(mu, logvar) * len(idx)
        probs_all.append(probs), experts_all.append(experts), mu_all.append(mu)
    probs = np.concatenate(probs_all)
    breakdown = losses.loss_breakdown(recon_sum / n, kl_sum / n, probs, loss_config)
    return breakdown, np.concatenate(experts_all), np.concatenate(mu_all)


def evaluate(model: SmoeVae, dataset: Dataset, routing_mode=UNSUPERVISED, loss_config=None) -> LossBreakdown:
    return evaluate_full(model, dataset, routing_mode, loss_config)[0]


class Trainer:
    """Owns one training run: model, optimizer, noise stream and metric history."""

    def __init__(self, config: TrainConfig, train_set: Dataset, test_set: Dataset, model=None):
        self.config = config
        self.train_set, self.test_set = train_set, test_set
        if config.routing_mode != UNSUPERVISED and config.model.num_experts != train_set.num_classes:
            raise ValueError(f"{config.routing_mode} routing needs num_experts == {train_set.num_classes} classes, "
                             f"got {config.model.num_experts}")
        self.model = model or init(config.model, make_rng([config.seed, 0]))
        self.optimizer = Adam(self.model.params(), lr=config.lr)
        self.noise_rng = make_rng([config.seed, 1])
        self.plan = BatchPlan(config.batch_size, config.seed, drop_last=True)
        self.rows: list[MetricRow] = []
        self.epoch = 0
        self.checkpoint_extra = None     # extra manifest entries for checkpoints written by run()

    def train_epoch(self):
        cfg, model = self.config, self.model
        gate_params = model.gate_params
        sums = dict.fromkeys(("recon", "kl", "balance", "entropy", "gating", "total"), 0.0)
        nb = 0
        for b, (x, labels) in enumerate(batches(self.train_set, self.plan, self.epoch)):
            model.zero_grad()
            route = _routing_for(model, labels, cfg.routing_mode)
            fwd = model.forward_soft(x, self.noise_rng, route=route)
            lb = losses.total_loss(x, fwd, cfg.loss)
            if not np.isfinite(lb.total):
                raise DivergedError(self.epoch, b, lb.total)
            model.backward(fwd, losses.total_loss_grads(x, fwd, cfg.loss))
            if cfg.routing_mode == SUPERVISED_ORACLE and any(p.grad.any() for p in gate_params):
                raise RuntimeError("gating network received gradient under oracle routing")
            if cfg.routing_mode == SUPERVISED_GATE:
                self._gate_cross_entropy(fwd.latent.z, labels)
            self.optimizer.step()
            for k in sums:
                sums[k] += getattr(lb, k)
            nb += 1
        return {k: v / max(nb, 1) for k, v in sums.items()}

    def _gate_cross_entropy(self, z, labels):
        # gate learns to predict labels from a detached latent
        g = self.model.gate(np.array(z))
        onehot = route_supervised(labels, self.model.config.num_experts, self.model.dtype).probs
        dlogits = self.config.gate_ce_weight * (g.probs - onehot) / len(labels)
        self.model.gate_net.backward(dlogits.astype(self.model.dtype))

    def run(self, out_dir=None, checkpoint_every_epoch=False) -> list[MetricRow]:
        out = Path(out_dir) if out_dir is not None else None
        while self.epoch < self.config.epochs:
            t0 = time.perf_counter()
            train_stats = self.train_epoch()
            test_lb, experts, _ = evaluate_full(self.model, self.test_set, self.config.routing_mode, self.config.loss)
            fractions, dead = utilization(experts, self.model.config.num_experts)
            row = MetricRow(self.epoch, train_stats, test_lb.as_dict(), [float(f) for f in fractions], dead,
                            int(np.sum(fractions > 0)), time.perf_counter() - t0)
            self.rows.append(row)
            self.epoch += 1
            log.info("epoch %d train_total=%.4f test_recon=%.4f dead=%d", row.epoch, train_stats["total"],
                     test_lb.recon, dead)
            if out is not None:
                write_metrics(out / "metrics.csv", self.rows)
                write_timing(out / "timing.csv", self.rows)
                if checkpoint_every_epoch:
                    save_checkpoint(self, out / f"epoch{self.epoch:03d}.ckpt", self.checkpoint_extra)
        if out is not None:
            save_checkpoint(self, out / "model.ckpt", self.checkpoint_extra)
        return self.rows


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset, out_dir=None):
    """Train from scratch; returns ``(model, metric rows)``."""
    trainer = Trainer(config, train_set, test_set)
    rows = trainer.run(out_dir)
    return trainer.model, rows


# ---------------------------------------------------------------------------
# metric files

def write_metrics(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(r.csv_row())


def write_timing(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in rows:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic (8 bytes) | u32 version | u64 manifest length | manifest JSON |
# little-endian tensor payload in manifest order (model params, then Adam moments)

def _rng_state_json(rng):
    return rng.bit_generator.state


def save_checkpoint(trainer_or_model, path, extra=None):
    if isinstance(trainer_or_model, Trainer):
        tr, model = trainer_or_model, trainer_or_model.model
    else:
        tr, model = None, trainer_or_model
    dtype = "<f4" if model.dtype == np.float32 else "<f8"
    tensors = [(p.name, p.value) for p in model.params()]
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": dtype,
        "model": model.config.to_dict(),
        "params": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
    }
    if tr is not None:
        opt_tensors = list(tr.optimizer.state_tensors())
        manifest.update({
            "train_config": tr.config.to_dict(),
            "class_names": list(tr.train_set.class_names),
            "data": tr.train_set.provenance,
            "epoch": tr.epoch,
            "metrics": [r.to_dict() for r in tr.rows],
            "rng_state": _rng_state_json(tr.noise_rng),
            "optimizer": {"lr": tr.optimizer.lr, "beta1": tr.optimizer.beta1, "beta2": tr.optimizer.beta2,
                          "eps": tr.optimizer.eps, "step_count": tr.optimizer.step_count,
                          "tensors": [{"name": n, "shape": list(v.shape)} for n, v in opt_tensors]},
        })
        tensors += opt_tensors
    if extra:
        manifest.update(extra)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype=dtype).tobytes())


@dataclass
class CheckpointData:
    model: SmoeVae
    manifest: dict
    optimizer_tensors: dict


def read_checkpoint(path) -> CheckpointData:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < 20:
        raise CheckpointCorruptError(f"{path}: truncated preamble")
    version, mlen = struct.unpack("<IQ", buf[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(buf[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest ({exc})") from None
    try:
        dtype = np.dtype(manifest["dtype"])
        entries = manifest["params"] + manifest.get("optimizer", {}).get("tensors", [])
        sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed manifest ({exc!r})") from None
    expected = sum(sizes) * dtype.itemsize
    payload = buf[20 + mlen:]
    if len(payload) != expected:
        raise CheckpointCorruptError(f"{path}: payload has {len(payload)} bytes, manifest implies {expected}")
    flat = np.frombuffer(payload, dtype=dtype)
    arrays, offset = {}, 0
    for e, size in zip(entries, sizes):
        arrays[e["name"]] = flat[offset:offset + size].reshape(e["shape"]).astype(dtype.newbyteorder("="))
        offset += size
    try:
        model = SmoeVae(ModelConfig(**manifest["model"]), make_rng(0), dtype.newbyteorder("="))
        model.load_state_dict({e["name"]: arrays[e["name"]] for e in manifest["params"]})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: manifest does not describe a loadable model ({exc!r})") from None
    opt = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return CheckpointData(model, manifest, opt)


def load_checkpoint(path) -> SmoeVae:
    return read_checkpoint(path).model


def resume(path, train_set: Dataset, test_set: Dataset, epochs=None) -> Trainer:
    """Rebuild a Trainer mid-run from a checkpoint written by ``Trainer.run``."""
    ck = read_checkpoint(path)
    m = ck.manifest
    if "train_config" not in m:
        raise CheckpointFormatError(f"{path}: checkpoint holds no training state")
    config = TrainConfig.from_dict(m["train_config"])
    if epochs is not None:
        config.epochs = epochs
    tr = Trainer(config, train_set, test_set, model=ck.model)
    tr.optimizer.step_count = m["optimizer"]["step_count"]
    for p in tr.model.params():
        tr.optimizer.m[p.name][...] = ck.optimizer_tensors[f"adam.m.{p.name}"]
        tr.optimizer.v[p.name][...] = ck.optimizer_tensors[f"adam.v.{p.name}"]
    tr.noise_rng.bit_generator.state = m["rng_state"]
    tr.rows = [MetricRow(**r) for r in m["metrics"]]
    tr.epoch = m["epoch"]
    return tr

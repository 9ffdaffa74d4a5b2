"""Multi-run protocols: the experts x dataset-fraction sweep and the homogeneity study."""
from __future__ import annotations

import copy
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..backbone import make_rng
from ..data import Dataset
from ..model import UNSUPERVISED
from ..training import DivergedError, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

DEFAULT_EXPERTS = (1, 2, 3, 5, 7, 10, 14, 23)
DEFAULT_FRACTIONS = (0.05, 0.1, 0.2, 0.4, 0.7, 1.0)
SWEEP_FIELDS = ["experts", "fraction", "samples_per_expert", "seed", "test_recon", "dead_experts",
                "active_experts", "status"]


@dataclass
class SweepCell:
    num_experts: int
    fraction: float
    samples_per_expert: int
    mean_recon: float
    std_recon: float
    mean_dead: float
    n_ok: int
    n_failed: int


def _with(config: TrainConfig, **changes) -> TrainConfig:
    cfg = copy.deepcopy(config)
    for k, v in changes.items():
        if k == "num_experts":
            cfg.model.num_experts = v
        else:
            setattr(cfg, k, v)
    return cfg


def _key(experts, fraction, seed):
    return int(experts), f"{float(fraction):g}", int(seed)


def read_sweep_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_cell(config: TrainConfig, experts, seed, train_set: Dataset, test_set: Dataset) -> dict:
    cfg = _with(config, num_experts=experts, seed=seed)
    row = {"experts": experts, "samples_per_expert": len(train_set) // experts, "seed": seed}
    try:
        _, rows = train(cfg, train_set, test_set)
    except DivergedError as exc:
        log.warning("cell E=%d seed=%d diverged: %s", experts, seed, exc)
        return dict(row, test_recon=float("nan"), dead_experts=-1, active_experts=-1, status="diverged")
    last = rows[-1]
    return dict(row, test_recon=last.test["recon"], dead_experts=last.dead_experts,
                active_experts=last.active_experts, status="ok")


def sweep(expert_counts: Sequence[int], fractions: Sequence[float], seeds: Sequence[int], base_config: TrainConfig,
          data_fn: Callable[[float], tuple[Dataset, Dataset]], csv_path=None, workers=1) -> list[SweepCell]:
    """Train one model per (experts, fraction, seed); final-epoch test recon per run.

    ``data_fn(fraction)`` returns ``(train, test)``. With ``csv_path`` each run is
    appended as it finishes and runs already present in the file are skipped,
    so an interrupted sweep resumes where it stopped. ``workers > 1`` trains
    runs in separate processes; rows are still written in grid order.
    """
    if not expert_counts or not fractions or not seeds:
        raise ValueError("sweep grids must be non-empty")
    done = {}
    if csv_path is not None:
        for r in read_sweep_csv(csv_path):
            done[_key(r["experts"], r["fraction"], r["seed"])] = r
    results = {}
    for fraction in fractions:
        pending = []
        for e in expert_counts:
            for seed in seeds:
                key = _key(e, fraction, seed)
                if key in done:
                    r = done[key]
                    results[key] = {"test_recon": float(r["test_recon"]), "dead_experts": int(r["dead_experts"]),
                                    "samples_per_expert": int(r["samples_per_expert"]), "status": r["status"]}
                else:
                    pending.append((e, seed))
        if not pending:
            continue
        train_set, test_set = data_fn(fraction)
        jobs = [(base_config, e, seed, train_set, test_set) for e, seed in pending]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = pool.map(_run_cell_args, jobs)
                for (e, seed), row in zip(pending, rows):
                    _record(results, csv_path, dict(row, fraction=fraction))
        else:
            for job in jobs:
                _record(results, csv_path, dict(run_cell(*job), fraction=fraction))
    cells = []
    for e in expert_counts:
        for fraction in fractions:
            runs = [results[_key(e, fraction, s)] for s in seeds]
            ok = [r for r in runs if r["status"] == "ok"]
            recon = np.array([r["test_recon"] for r in ok])
            cells.append(SweepCell(e, float(fraction), runs[0]["samples_per_expert"],
                                   float(recon.mean()) if ok else float("nan"),
                                   float(recon.std()) if ok else float("nan"),
                                   float(np.mean([r["dead_experts"] for r in ok])) if ok else float("nan"),
                                   len(ok), len(runs) - len(ok)))
    return cells


def _run_cell_args(args):
    return run_cell(*args)


def _record(results, csv_path, row):
    results[_key(row["experts"], row["fraction"], row["seed"])] = row
    if csv_path is not None:
        _append_row(csv_path, row)


def _append_row(path, row):
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(SWEEP_FIELDS)
        w.writerow([row["experts"], f"{float(row['fraction']):g}", row["samples_per_expert"], row["seed"],
                    repr(float(row["test_recon"])), row["dead_experts"], row["active_experts"], row["status"]])


# ---------------------------------------------------------------------------
# homogeneity

@dataclass
class HomogeneityReport:
    multi_class_loss: float
    mean_single_class_loss: float
    big_data_loss: float
    single_class_losses: dict = field(default_factory=dict)
    budget: int = 0
    big_budget: int = 0

    def to_dict(self):
        return {"multi_class_loss": self.multi_class_loss, "mean_single_class_loss": self.mean_single_class_loss,
                "big_data_loss": self.big_data_loss, "single_class_losses": self.single_class_losses,
                "budget": self.budget, "big_budget": self.big_budget}


def _balanced_pick(pool: Dataset, per_class: int, rng) -> np.ndarray:
    idx = []
    for c in range(pool.num_classes):
        members = np.flatnonzero(pool.labels == c)
        if len(members) < per_class:
            raise ValueError(f"class {pool.class_names[c]!r} has {len(members)} pool samples, {per_class} needed")
        idx.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(idx))


def homogeneity_experiment(config: TrainConfig, pool: Dataset, test: Dataset, budget=None,
                           big_factor=20, run_big=True) -> HomogeneityReport:
    """Single-expert models on mixed vs single-class data of equal size.

    (a) one expert on ``budget`` samples balanced over all classes;
    (b) one expert per class on ``budget`` samples of that class, each scored on
        that class's test samples, losses averaged;
    (c) one expert on ``big_factor * budget`` mixed samples.
    ``budget`` defaults to ``len(pool) // big_factor`` rounded down to a multiple
    of the class count. ``run_big=False`` skips (c) and reports its loss as NaN.
    """
    k = pool.num_classes
    budget = budget or (len(pool) // big_factor)
    budget -= budget % k
    rng = make_rng([config.seed, 7])
    cfg = _with(config, num_experts=1, routing_mode=UNSUPERVISED)

    def fit_eval(train_set, test_set):
        model, _ = train(cfg, train_set, test_set)
        return evaluate(model, test_set, UNSUPERVISED, cfg.loss).recon

    mixed = pool.subset(_balanced_pick(pool, budget // k, rng))
    multi = fit_eval(mixed, test)
    singles = {}
    for c, name in enumerate(pool.class_names):
        members = np.flatnonzero(pool.labels == c)
        if len(members) < budget:
            raise ValueError(f"class {name!r} has {len(members)} pool samples, budget is {budget}")
        pick = np.sort(rng.choice(members, size=budget, replace=False))
        singles[name] = fit_eval(pool.subset(pick), test.subset(np.flatnonzero(test.labels == c)))
    big_loss = float("nan")
    if run_big:
        big = pool.subset(_balanced_pick(pool, big_factor * budget // k, rng))
        big_loss = fit_eval(big, test)
    return HomogeneityReport(multi, float(np.mean(list(singles.values()))), big_loss, singles,
                             budget, big_factor * budget)

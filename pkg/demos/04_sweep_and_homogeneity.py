#!/usr/bin/env python3
"""A miniature experts x data-fraction sweep, then the homogeneity comparison.

Homogeneity asks whether one expert learns better from a single class than
from a mix of classes of the same total size. Defaults finish in a couple of
minutes; raise --epochs and --per-class for a closer look.
"""
import argparse
from pathlib import Path

from smoe_vae.analysis import homogeneity_experiment, sweep
from smoe_vae.data import SyntheticSpec, build_dataset, synthetic_sources
from smoe_vae.model import ModelConfig
from smoe_vae.training import TrainConfig

parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
parser.add_argument("--epochs", type=int, default=2)
parser.add_argument("--per-class", type=int, default=400)
parser.add_argument("--out", default="sweep_run")
args = parser.parse_args()

sources = synthetic_sources(SyntheticSpec(samples_per_class=args.per_class))
base = TrainConfig(epochs=args.epochs, model=ModelConfig())


def data_for(fraction):
    return build_dataset(sources, args.per_class, fraction, seed=0)


# Each cell trains one model per seed; rerunning with the same CSV skips cells already done.
csv_path = Path(args.out) / "sweep.csv"
cells = sweep([1, 3, 5], [0.5, 1.0], [0], base, data_for, csv_path=csv_path)
print("experts  fraction  samples/expert  test recon  dead")
for c in cells:
    print(f"{c.num_experts:7d}  {c.fraction:8.2f}  {c.samples_per_expert:14d}  {c.mean_recon:10.3f}  {c.mean_dead:4.0f}")
print(f"rows in {csv_path}")

# (a) mixed classes, (b) one class at a time with the same budget, (c) five times the mixed data.
# The full protocol uses twenty times; a small pool would leave budgets below one batch.
pool, test = data_for(1.0)
report = homogeneity_experiment(base, pool, test, big_factor=5)
print(f"\nbudget {report.budget}: mixed {report.multi_class_loss:.3f}, "
      f"single-class average {report.mean_single_class_loss:.3f}, "
      f"mixed x{report.big_budget // report.budget} {report.big_data_loss:.3f}")
for name, loss in report.single_class_losses.items():
    print(f"  {name:6s} {loss:.3f}")

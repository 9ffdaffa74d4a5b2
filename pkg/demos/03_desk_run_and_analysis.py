#!/usr/bin/env python3
"""Train on the synthetic sketch classes, then look at what the experts picked up.

Defaults are small (3 epochs); --epochs 20 matches the full protocol and takes
a few minutes per run on one core. Outputs land in --out (default ./desk_run).
"""
import argparse
import json
from pathlib import Path

import numpy as np

from smoe_vae.analysis import (DegenerateTargetError, agreement, assignments, linear_probe, recon_grid, tsne,
                               write_embedding_csv)
from smoe_vae.analysis.specialization import contingency
from smoe_vae.data import SyntheticSpec, build_dataset, synthetic_sources
from smoe_vae.model import SUPERVISED_ORACLE, UNSUPERVISED, ModelConfig
from smoe_vae.training import TrainConfig, train

parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
parser.add_argument("--experts", type=int, default=5)
parser.add_argument("--epochs", type=int, default=3)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--per-class", type=int, default=2000)
parser.add_argument("--out", default="desk_run")
args = parser.parse_args()
out = Path(args.out)

# 1. data: five procedurally drawn classes standing in for the sketch categories
train_set, test_set = build_dataset(synthetic_sources(SyntheticSpec(samples_per_class=args.per_class)),
                                    args.per_class, seed=0)
print(f"train {len(train_set)}  test {len(test_set)}  classes {train_set.class_names}")

# 2. unsupervised routing vs labels as the router (one expert per class)
runs = {}
for mode, e in [(UNSUPERVISED, args.experts), (SUPERVISED_ORACLE, train_set.num_classes)]:
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, routing_mode=mode, model=ModelConfig(num_experts=e))
    model, rows = train(cfg, train_set, test_set, out_dir=out / f"{mode}_E{e}")
    runs[mode] = model
    last = rows[-1]
    print(f"{mode:18s} E={e}: test recon {last.test['recon']:.3f}, dead experts {last.dead_experts}, "
          f"utilization {np.round(last.utilization, 3)}")

# 3. who goes where: rows are the experts that received samples, columns are classes
table = assignments(runs[UNSUPERVISED], test_set)
print("\nexpert x class counts on the test split:")
print(contingency(table.experts, table.labels))
print("agreement:", json.dumps(agreement(table)))

# 4. are expert assignments easier to read off the latent than the labels?
try:
    exp = linear_probe(table, "expert").test_accuracy
    print(f"linear probe: expert {exp:.3f}, class {linear_probe(table, 'class').test_accuracy:.3f}")
except DegenerateTargetError as exc:
    # every sample went to one expert; nothing to decode
    print("linear probe skipped:", exc)

# 5. a 2-D picture of the latent means, and per-expert reconstructions
emb = tsne(table.mu, perplexity=30, iters=500, seed=0, max_points=1000)
write_embedding_csv(out / "embedding.csv", emb, table.experts, table.labels, test_set.class_names)
grids = recon_grid(runs[UNSUPERVISED], table, test_set, out / "grids")
print(f"\nt-SNE of {len(emb.indices)} points (KL {emb.kl:.3f}) -> {out / 'embedding.csv'}")
print(f"{len(grids)} reconstruction grids -> {out / 'grids'}")
print((out / "grids" / "captions.txt").read_text())

"""Command-line driver for training, evaluation, and the analysis protocol.

Exit codes: 0 ok, 1 analysis error, 2 configuration error, 3 divergence,
4 checkpoint error, 5 data error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .analysis import (DEFAULT_EXPERTS, DEFAULT_FRACTIONS, agreement, assignments, homogeneity_experiment,
                       linear_probe, recon_grid, sweep, tsne, write_embedding_csv)
from .analysis.specialization import DegenerateTargetError
from .analysis.tsne import MAX_POINTS
from .data import NpyFormatError, InsufficientDataError, SyntheticSpec, build_dataset, synthetic_sources
from .losses import LossConfig
from .model import ROUTING_MODES, ModelConfig
from .training import (CheckpointError, DivergedError, TrainConfig, Trainer, evaluate, read_checkpoint)

log = logging.getLogger("smoe_vae")

EXIT_OK, EXIT_ANALYSIS, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_DATA = 0, 1, 2, 3, 4, 5

DEFAULT_RUN_CONFIG = {
    "model": {f.name: (list(f.default) if isinstance(f.default, tuple) else f.default) for f in fields(ModelConfig)},
    "loss": {f.name: f.default for f in fields(LossConfig)},
    "train": {"epochs": 20, "lr": 1e-4, "batch_size": 128, "seed": 0, "routing_mode": "unsupervised",
              "gate_ce_weight": 1.0},
    "data": {"source": "synthetic", "fraction": 1.0, "per_class": 70000, "split_seed": 0},
    "out_dir": None,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _merge_strict(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "source":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge_strict(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = {}
    leaf = node
    for p in parts[:-1]:
        leaf[p] = {}
        leaf = leaf[p]
    leaf[parts[-1]] = _parse_value(value)
    _merge_strict(cfg, node)


def load_run_config(path=None, overrides=()):
    """Defaults, then the JSON file, then ``--set`` overrides; unknown keys are fatal."""
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be an object")
        _merge_strict(cfg, user)
    for o in overrides:
        apply_override(cfg, o)
    train_config(cfg)  # validate eagerly
    return cfg


def train_config(cfg) -> TrainConfig:
    try:
        return TrainConfig(model=ModelConfig(**cfg["model"]), loss=LossConfig(**cfg["loss"]), **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def build_data(cfg, fraction=None):
    d = cfg["data"]
    fraction = d["fraction"] if fraction is None else fraction
    if d["source"] == "synthetic":
        sources = synthetic_sources(SyntheticSpec(samples_per_class=d["per_class"], seed=d["split_seed"]))
    elif isinstance(d["source"], dict):
        sources = d["source"]
    else:
        raise ConfigError("data.source must be \"synthetic\" or an object mapping class name to NPY path")
    return build_dataset(sources, d["per_class"], fraction, d["split_seed"])


def resolve_out_dir(cfg, flag=None):
    out = flag or cfg.get("out_dir") or os.environ.get("SMOE_OUT_DIR")
    if not out:
        raise ConfigError("no output directory: set out_dir in the config, pass --out-dir, or set SMOE_OUT_DIR")
    return Path(out)


def _echo_config(cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = load_run_config(args.config, args.set)
    out = resolve_out_dir(cfg, args.out_dir)
    cfg["out_dir"] = str(out)
    _echo_config(cfg, out)
    tc = train_config(cfg)
    train_set, test_set = build_data(cfg)
    trainer = Trainer(tc, train_set, test_set)
    trainer.checkpoint_extra = {"run_config": cfg}
    trainer.run(out, checkpoint_every_epoch=args.checkpoint_every_epoch)
    last = trainer.rows[-1]
    print(json.dumps({"epoch": last.epoch, "test_recon": last.test["recon"], "dead_experts": last.dead_experts}))
    return EXIT_OK


def _load_for_analysis(args):
    ck = read_checkpoint(args.checkpoint)
    cfg = load_run_config(args.data) if args.data else ck.manifest.get("run_config")
    if cfg is None:
        raise ConfigError(f"{args.checkpoint} carries no run config; pass --data CONFIG")
    train_set, test_set = build_data(cfg)
    dataset = test_set if args.split == "test" else train_set
    mode = ck.manifest.get("train_config", cfg["train"]).get("routing_mode", "unsupervised")
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).resolve().parent
    return ck, cfg, dataset, mode, out


def cmd_eval(args):
    ck, cfg, dataset, mode, _ = _load_for_analysis(args)
    lb = evaluate(ck.model, dataset, mode, LossConfig(**cfg["loss"]))
    print(json.dumps(lb.as_dict(), sort_keys=True))
    return EXIT_OK


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_probe(args):
    ck, cfg, dataset, mode, out = _load_for_analysis(args)
    table = assignments(ck.model, dataset, mode)
    res, acc = {"split": args.split}, {}
    for target in ("expert", "class"):
        try:
            res[target] = linear_probe(table, target, seed=args.seed).to_dict()
            acc[target] = res[target]["test_accuracy"]
        except DegenerateTargetError as exc:
            # a single routed expert leaves nothing to decode; record it instead of failing
            res[target] = {"target": target, "degenerate": str(exc)}
            acc[target] = None
    res["gap"] = None if None in acc.values() else acc["expert"] - acc["class"]
    _write_json(out / "probe.json", res)
    print(json.dumps(acc))
    return EXIT_OK


def cmd_agreement(args):
    ck, cfg, dataset, mode, out = _load_for_analysis(args)
    res = agreement(assignments(ck.model, dataset, mode))
    _write_json(out / "agreement.json", dict(res, split=args.split))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_tsne(args):
    ck, cfg, dataset, mode, out = _load_for_analysis(args)
    table = assignments(ck.model, dataset, mode)
    emb = tsne(table.mu, perplexity=args.perplexity, iters=args.iters, seed=args.seed, max_points=args.max_points)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(out / "embedding.csv", emb, table.experts, table.labels, dataset.class_names)
    print(json.dumps({"points": len(emb.indices), "kl": emb.kl}))
    return EXIT_OK


def cmd_grid(args):
    ck, cfg, dataset, mode, out = _load_for_analysis(args)
    table = assignments(ck.model, dataset, mode)
    written = recon_grid(ck.model, table, dataset, out / "grids", per_expert=args.per_expert, seed=args.seed)
    print(json.dumps({"grids": [str(p) for p in written]}))
    return EXIT_OK


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args):
    cfg = load_run_config(args.config, args.set)
    out = resolve_out_dir(cfg, args.out_dir)
    cfg["out_dir"] = str(out)
    _echo_config(cfg, out)
    cells = sweep(args.experts, args.fractions, args.seeds, train_config(cfg),
                  lambda f: build_data(cfg, fraction=f), csv_path=out / "sweep.csv", workers=args.workers)
    with open(out / "sweep_summary.csv", "w") as fh:
        fh.write("experts,fraction,samples_per_expert,mean_recon,std_recon,mean_dead,n_ok,n_failed\n")
        for c in cells:
            fh.write(f"{c.num_experts},{c.fraction:g},{c.samples_per_expert},{c.mean_recon!r},{c.std_recon!r},"
                     f"{c.mean_dead!r},{c.n_ok},{c.n_failed}\n")
    print(json.dumps({"cells": len(cells), "csv": str(out / "sweep.csv")}))
    return EXIT_OK


def cmd_homogeneity(args):
    cfg = load_run_config(args.config, args.set)
    out = resolve_out_dir(cfg, args.out_dir)
    cfg["out_dir"] = str(out)
    _echo_config(cfg, out)
    pool, test = build_data(cfg)
    reports = []
    for seed in args.seeds:
        tc = train_config(cfg)
        tc.seed = seed
        reports.append(homogeneity_experiment(tc, pool, test, budget=args.budget, big_factor=args.big_factor))
    summary = {key: float(np.median([getattr(r, key) for r in reports]))
               for key in ("multi_class_loss", "mean_single_class_loss", "big_data_loss")}
    _write_json(out / "homogeneity.json", {"median": summary, "seeds": args.seeds,
                                           "runs": [r.to_dict() for r in reports]})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="smoe-vae", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help="run config JSON (defaults: beta 0.1, lambda_balance 200, "
                                                      "lambda_entropy 400, lr 1e-4, 20 epochs)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.seed=7")
        p.add_argument("--out-dir", default=None, help="output directory (else config out_dir, else $SMOE_OUT_DIR)")

    def with_checkpoint(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint written by `train`")
        p.add_argument("--data", default=None, help="run config JSON whose data section to use "
                                                    "(default: the config stored in the checkpoint)")
        p.add_argument("--split", choices=("train", "test"), default="test", help="dataset split to analyse")
        p.add_argument("--out-dir", default=None, help="output directory (default: the checkpoint's directory)")

    p = sub.add_parser("train", help="train one model", formatter_class=fmt)
    with_config(p)
    p.add_argument("--checkpoint-every-epoch", action="store_true", help="also write epochNNN.ckpt files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="hard-gated evaluation, one JSON line", formatter_class=fmt)
    with_checkpoint(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="linear probes for expert and class targets", formatter_class=fmt)
    with_checkpoint(p)
    p.add_argument("--seed", type=int, default=0, help="probe split seed")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("agreement", help="NMI / ARI / mapped accuracy of experts vs classes", formatter_class=fmt)
    with_checkpoint(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("tsne", help="exact t-SNE of latent means to embedding.csv", formatter_class=fmt)
    with_checkpoint(p)
    p.add_argument("--perplexity", type=float, default=30.0, help="t-SNE perplexity")
    p.add_argument("--iters", type=int, default=1000, help="optimization iterations")
    p.add_argument("--seed", type=int, default=0, help="initialization / subsampling seed")
    p.add_argument("--max-points", type=int, default=MAX_POINTS, help="subsample above this many points")
    p.set_defaults(func=cmd_tsne)

    p = sub.add_parser("grid", help="per-expert input/reconstruction PGM grids", formatter_class=fmt)
    with_checkpoint(p)
    p.add_argument("--per-expert", type=int, default=5, help="images per expert")
    p.add_argument("--seed", type=int, default=0, help="sample selection seed")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("sweep", help="experts x dataset-fraction sweep (resumable)", formatter_class=fmt)
    with_config(p)
    p.add_argument("--experts", type=_int_list, default=list(DEFAULT_EXPERTS), help="comma-separated expert counts")
    p.add_argument("--fractions", type=_float_list, default=list(DEFAULT_FRACTIONS),
                   help="comma-separated dataset fractions")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="comma-separated seeds")
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("homogeneity", help="single-expert mixed vs single-class study", formatter_class=fmt)
    with_config(p)
    p.add_argument("--budget", type=int, default=None, help="samples per run (default: pool size / big factor)")
    p.add_argument("--big-factor", type=int, default=20, help="data multiplier for the big-data run")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="comma-separated seeds")
    p.set_defaults(func=cmd_homogeneity)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (NpyFormatError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS

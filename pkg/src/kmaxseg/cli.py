"""Command-line entry point.

Subcommands:
  train      train a model from a config file; writes checkpoint + metrics CSV
  eval       evaluate a checkpoint on the seeded validation split
  ablate     kernel-swap and decoder-count studies at equal step budgets
  visualize  render per-stage assignment maps and the final panoptic map
  selftest   run the acceptance suite
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import Config, load_config, save_config
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticDataset, generate
from .errors import ConfigError
from .metrics import evaluate_model, evaluation_report
from .model import KMaxModel
from .training import scene_spec_from_config, train_loop


def _load_config(path):
    if path is None:
        return Config()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_config(path)


def _build_dataset(cfg):
    return SyntheticDataset(scene_spec_from_config(cfg), cfg.train.train_size,
                            cfg.train.val_size, threads=cfg.data.threads)


def _cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(out_dir, "model.ckpt")
    metrics = os.path.join(out_dir, "metrics.csv")
    result = train_loop(cfg, seed=cfg.train.seed, checkpoint_path=ckpt,
                        metrics_path=metrics)
    save_config(cfg, os.path.join(out_dir, "config.used.txt"))
    print(f"trained {cfg.train.steps} steps in {result.seconds:.0f}s; "
          f"val PQ {result.final_val_pq!r}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics}")
    return 0


def _cmd_eval(args):
    cfg = _load_config(args.config)
    if args.checkpoint is None:
        raise ConfigError("eval requires --checkpoint")
    model = KMaxModel(cfg.model, seed=0)
    load_checkpoint(args.checkpoint, model)
    dataset = _build_dataset(cfg)
    result = evaluate_model(model, dataset.val, cfg.infer, dataset.class_table)
    print(evaluation_report(result, dataset.class_table))
    return 0


def _cmd_ablate(args):
    cfg = _load_config(args.config)
    seeds = [cfg.train.seed + i for i in range(args.seeds)]
    variants = [
        ("softmax cross-attention", dict(kernel="softmax")),
        ("kmeans cross-attention", dict(kernel="kmeans")),
        ("kmeans cross-attention (normalized)",
         dict(kernel="kmeans", kmeans_normalize=True)),
        ("kmeans, decoders (1,1,1)", dict(kernel="kmeans", schedule=(1, 1, 1))),
        ("kmeans, decoders (2,2,2)", dict(kernel="kmeans", schedule=(2, 2, 2))),
        ("kmeans, decoders (3,3,3)", dict(kernel="kmeans", schedule=(3, 3, 3))),
    ]
    print(f"steps per run: {cfg.train.steps}, seeds: {seeds}")
    print(f"{'variant':40s} {'params':>9s} {'median PQ':>10s}  per-seed PQ")
    for name, overrides in variants:
        run_cfg = _load_config(args.config)
        for key, value in overrides.items():
            setattr(run_cfg.model, key, value)
        pqs = []
        for seed in seeds:
            pqs.append(train_loop(run_cfg, seed=seed).final_val_pq)
        params = KMaxModel(run_cfg.model, seed=0).parameter_count()
        per_seed = " ".join(f"{v:.4f}" for v in pqs)
        print(f"{name:40s} {params:9d} {np.median(pqs):10.4f}  {per_seed}")
    return 0


def _cmd_visualize(args):
    from .visualize import render_stages

    cfg = _load_config(args.config)
    model = KMaxModel(cfg.model, seed=cfg.train.seed)
    if args.checkpoint is not None:
        load_checkpoint(args.checkpoint, model)
    spec = scene_spec_from_config(cfg)
    index = SyntheticDataset.VAL_OFFSET + (args.seed or 0)
    img, _ = generate(spec, index)
    out_dir = args.out or "visualizations"
    paths = render_stages(model, img, cfg.infer,
                          spec.class_table().thing_ids, out_dir)
    for path in paths:
        print(path)
    return 0


def _cmd_selftest(args):
    from .acceptance import run_all

    return run_all(fast=args.fast)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kmaxseg",
        description="toy-scale mask-transformer panoptic segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", metavar="PATH", help="config file (key = value text)")
        p.add_argument("--seed", type=int, metavar="INT")
        p.add_argument("--out", metavar="DIR")
        if checkpoint:
            p.add_argument("--checkpoint", metavar="PATH")

    common(sub.add_parser("train", help="train a model"), checkpoint=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    ablate = sub.add_parser("ablate", help="kernel and decoder-count studies")
    common(ablate)
    ablate.add_argument("--seeds", type=int, default=3, metavar="N",
                        help="number of seeds per variant (default 3)")
    common(sub.add_parser("visualize", help="render assignment maps"), checkpoint=True)
    selftest = sub.add_parser("selftest", help="run the acceptance suite")
    selftest.add_argument("--fast", action="store_true",
                          help="skip the training-based criteria")
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "visualize": _cmd_visualize,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface anything else with a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

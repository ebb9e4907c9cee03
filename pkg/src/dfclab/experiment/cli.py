"""Command-line entry point: ``dfclab {train,pretrain-feedback,analyze,gen-data}``."""
import argparse
import dataclasses
import logging
import os
import sys

from dfclab.controller import ConfigError
from dfclab.data import save_idx, write_idx
from dfclab.dynamics import DivergenceError
from dfclab.experiment.config import VARIANTS, ExperimentConfig, load_config
from dfclab.experiment.training import analyze, build_dataset, run_training

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=VARIANTS, help="override the training variant")
    common.add_argument("--fixed-feedback", action="store_true",
                        help="keep feedback weights at their fixed initialization")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dfclab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run a full training experiment")
    sub.add_parser("pretrain-feedback", parents=[common],
                   help="only pretrain the feedback weights and save a checkpoint")
    a = sub.add_parser("analyze", parents=[common], help="diagnostics for a saved checkpoint")
    a.add_argument("--checkpoint", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the configured dataset as IDX files")
    return p


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if args.variant:
        changes["variant"] = args.variant
    if args.fixed_feedback:
        changes["feedback_mode"] = "fixed"
    return dataclasses.replace(cfg, **changes).validate()


def _gen_data(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    train, test = build_dataset(cfg)
    written = []
    for name, ds in (("train", train), ("test", test)):
        if ds is None:
            continue
        if ds.kind == "classification":
            side = int(round(ds.inputs.shape[1] ** 0.5))
            shape = (side, side) if side * side == ds.inputs.shape[1] else None
            paths = [os.path.join(cfg.out_dir, f"{name}-images-idx3-ubyte"),
                     os.path.join(cfg.out_dir, f"{name}-labels-idx1-ubyte")]
            save_idx(ds, *paths, image_shape=shape)
        else:
            paths = [os.path.join(cfg.out_dir, f"{name}-inputs.idx"),
                     os.path.join(cfg.out_dir, f"{name}-targets.idx")]
            write_idx(paths[0], ds.inputs)
            write_idx(paths[1], ds.targets)
        written += paths
    return written


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            res = run_training(cfg)
            print(f"metrics: {res.metrics_path}")
        elif args.command == "pretrain-feedback":
            res = run_training(cfg, pretrain_only=True)
            print(f"metrics: {res.metrics_path}")
        elif args.command == "analyze":
            os.makedirs(cfg.out_dir, exist_ok=True)
            out = os.path.join(cfg.out_dir, "analysis.csv")
            analyze(args.checkpoint, cfg, out)
            print(f"analysis: {out}")
        else:
            for path in _gen_data(cfg):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``studyrec <stage> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import pipeline
from .experiment import ABLATIONS, MODELS, ExperimentConfig, StageError, StageRunner

log = logging.getLogger("studyrec")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key-value config file with [section] headers")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--stage-dir", type=Path, default=Path("runs/default"), help="artifact directory")
    common.add_argument("--grouping", choices=pipeline.GROUPINGS, help="grouping used to pack STUDY datapoints")
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--model", choices=MODELS, default="study")
    model_opts.add_argument("--mask-mode", choices=("positional", "temporal"), help="override the model's default mask")

    parser = argparse.ArgumentParser(prog="studyrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic cohort dataset")
    sub.add_parser("preprocess", parents=[common], help="split, build the vocabulary and pack epoch 0")
    sub.add_parser("train", parents=[common, model_opts], help="train a model or build a baseline")
    sub.add_parser("eval", parents=[common, model_opts], help="hits@n reports with bootstrap intervals and slices")
    ablate = sub.add_parser("ablate", parents=[common], help="run an ablation and write its comparative report")
    ablate.add_argument("--kind", choices=ABLATIONS, required=True)
    sub.add_parser("report", parents=[common], help="combine evaluation reports into one table")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.grouping:
        cfg = dataclasses.replace(cfg, pipeline=dataclasses.replace(cfg.pipeline, grouping=args.grouping))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        runner = StageRunner(args.stage_dir, resolve_config(args))
        if args.command == "generate":
            out = runner.generate()
        elif args.command == "preprocess":
            out = runner.preprocess()
        elif args.command == "train":
            out = runner.train(args.model, args.mask_mode)
        elif args.command == "eval":
            out = runner.evaluate(args.model, args.mask_mode)
        elif args.command == "ablate":
            out = runner.ablate(args.kind)
        else:
            out = runner.report()
    except StageError as exc:
        print(f"studyrec {args.command}: {exc}", file=sys.stderr)
        return 2
    for p in out:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())

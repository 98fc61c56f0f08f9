"""Command-line entry point for the full pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import PipelineConfig, apply_override
from .errors import FewsegError
from .pipeline import (evaluate, export_features, finetune, run_all,
                       run_stage1, run_stage2)
from .synthetic import gen_synthetic


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="root seed override")
    parser.add_argument("--out", type=Path, help="output directory override")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dot-path config override, e.g. stage1.tau=0.1")


def _build_config(args) -> PipelineConfig:
    cfg_dict = PipelineConfig().to_dict()
    if args.config:
        cfg_dict = PipelineConfig.load(args.config).to_dict()
    for item in args.override:
        if "=" not in item:
            raise FewsegError(f"--override needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        apply_override(cfg_dict, key, value)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.out is not None:
        cfg_dict["out_dir"] = str(args.out)
    return PipelineConfig.from_dict(cfg_dict)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewseg",
        description="Two-stage unsupervised pre-training and few-shot "
                    "segmentation evaluation on slice datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic dataset")
    p.add_argument("--n-patients", type=int, default=10)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    for name in ("pretrain-stage1", "pretrain-stage2", "finetune",
                 "evaluate", "run-all"):
        p = sub.add_parser(name)
        _add_common(p)
        if name in ("pretrain-stage2", "finetune", "evaluate"):
            p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("export-features", help="write feature-norm heatmaps")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("images", nargs="+", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-synthetic":
            path = gen_synthetic(args.n_patients, args.image_size, args.seed,
                                 args.out)
            print(path)
            return 0
        if args.command == "export-features":
            for written in export_features(args.checkpoint, args.images, args.out):
                print(written)
            return 0
        cfg = _build_config(args)
        if args.command == "pretrain-stage1":
            print(run_stage1(cfg))
        elif args.command == "pretrain-stage2":
            print(run_stage2(cfg, args.checkpoint))
        elif args.command == "finetune":
            print(finetune(cfg, args.checkpoint))
        elif args.command == "evaluate":
            report, path = evaluate(cfg, args.checkpoint)
            print(path)
            print(json.dumps({"overall_mean": report["overall_mean"]}))
        elif args.command == "run-all":
            report, path = run_all(cfg)
            print(path)
            print(json.dumps({"overall_mean": report["overall_mean"]}))
        return 0
    except FewsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

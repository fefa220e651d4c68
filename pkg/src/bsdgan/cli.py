"""Command-line entry point: stage-granular pipeline commands.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 training failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .config import PipelineConfig
from .errors import BsdganError, ConfigError, MissingArtifactError, TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_TRAINING = 4

logger = logging.getLogger(__name__)

_COMMANDS = {
    "prepare": "parse raw data, split, and write the dataset container",
    "pretrain": "train the autoencoder and fit the latent prior",
    "train": "adversarial training from the pretrained autoencoder",
    "balance": "oversample minority classes with verified generated windows",
    "evaluate-fid": "score generated windows against best/worst references",
    "benchmark": "classifier accuracy before/after balancing",
    "report": "merge all stage outputs into one document",
    "toy-data": "write the built-in three-class waveform dataset container",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsdgan",
        description="Balance class-imbalanced sensor-activity datasets with a conditional GAN.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, default=None, help="TOML config file")
        cmd.add_argument("--seed", type=int, default=None, help="override run.seed")
        cmd.add_argument("--out", type=Path, default=None, help="override run.out_dir")
        if name == "train":
            cmd.add_argument("--resume", action="store_true", help="continue from the saved train state")
    return parser


def _run(args: argparse.Namespace) -> int:
    config = PipelineConfig.load(
        path=args.config,
        seed=args.seed,
        out_dir=None if args.out is None else str(args.out),
    )
    if args.command == "toy-data":
        config.dataset.kind = "toy"
        config.validate()

    out_dir = Path(config.run.out_dir)
    with pipeline.output_lock(out_dir):
        if args.command in ("prepare", "toy-data"):
            manifest = pipeline.stage_prepare(config)
        elif args.command == "pretrain":
            manifest = pipeline.stage_pretrain(config)
        elif args.command == "train":
            manifest = pipeline.stage_train(config, resume=args.resume)
        elif args.command == "balance":
            manifest = pipeline.stage_balance(config)
        elif args.command == "evaluate-fid":
            manifest = pipeline.stage_evaluate_fid(config)
        elif args.command == "benchmark":
            manifest = pipeline.stage_benchmark(config)
        elif args.command == "report":
            manifest = pipeline.stage_report(config)
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command!r}")
    print(manifest)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except TrainingDiverged as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except BsdganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``extre <subcommand> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .pipeline import VARIANTS, ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config file")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--variant", choices=VARIANTS, default=None)
    common.add_argument("--no-mask", action="store_true", help="rank training positives too")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="extre", description="Cold-start group recommendation from consistency/discrepancy coefficients.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("split", parents=[common], help="split group-item interactions into train/valid/test")
    p = sub.add_parser("extract", parents=[common], help="compute and persist coefficient blocks")
    p.add_argument("--stage", choices=["pretrain", "finetune"], default="pretrain")
    sub.add_parser("pretrain", parents=[common], help="train the pretrain embeddings")
    sub.add_parser("finetune", parents=[common], help="train the finetune embeddings")
    sub.add_parser("evaluate", parents=[common], help="Top-K accuracy and diversity metrics on the test split")
    p = sub.add_parser("recommend", parents=[common], help="Top-K items for given groups")
    p.add_argument("--groups", required=True, help="comma-separated external group ids")
    p.add_argument("-k", type=int, default=10)
    sub.add_parser("run", parents=[common], help="split, extract, train and evaluate in one go")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config).with_overrides(args.seed, args.variant, args.no_mask)
        if args.command == "split":
            for path in pipeline.cmd_split(cfg):
                print(path)
        elif args.command == "extract":
            for path in pipeline.cmd_extract(cfg, args.stage):
                print(path)
        elif args.command == "pretrain":
            print(pipeline.cmd_pretrain(cfg))
        elif args.command == "finetune":
            print(pipeline.cmd_finetune(cfg))
        elif args.command == "evaluate":
            sys.stdout.write(pipeline.cmd_evaluate(cfg).to_table())
        elif args.command == "recommend":
            if args.k < 1:
                raise ConfigError("-k must be >= 1")
            groups = [g.strip() for g in args.groups.split(",") if g.strip()]
            rows = pipeline.cmd_recommend(cfg, groups, args.k)
            lines = "".join(f"{g}\t{rank}\t{item}\t{score:.6f}\n" for g, rank, item, score in rows)
            os.makedirs(cfg.variant_dir(), exist_ok=True)
            with open(os.path.join(cfg.variant_dir(), "recommend.tsv"), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(lines)
            sys.stdout.write(lines)
        elif args.command == "run":
            sys.stdout.write(pipeline.run_all(cfg).to_table())
    except ValueError as exc:
        # ConfigError, GraphError, TrainError and friends: bad input or missing prerequisites
        print(f"extre {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("extre").exception("runtime failure")
        print(f"extre {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

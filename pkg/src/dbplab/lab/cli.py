"""Command-line entry point.

Every subcommand takes ``--config <path>`` and ``--out <dir>``. Exit codes:
0 on success, 2 for configuration problems, 3 for numeric or training failures.
"""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, DeterminismError, FormatError, NumericError, TrainingError
from . import config as config_mod
from . import runners

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

COMMANDS = {
    "synth": runners.run_synth,
    "train-diffusion": runners.run_train_diffusion,
    "train-classifier": runners.run_train_classifier,
    "addt": runners.run_addt_finetune,
    "eval": runners.run_eval_all,
    "analyze": runners.run_analysis,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbplab", description="Purification robustness experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config)
        COMMANDS[args.command](cfg, args.out)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingError, DeterminismError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

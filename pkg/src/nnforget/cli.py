"""``nnforget`` command line.

    nnforget run --config exp.json --theta 0.5
    nnforget fit --config exp.json          # re-fit without retraining
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import add_config_flags, config_from_args
from .exceptions import ConfigurationError
from .pipeline import PHASES, Experiment, PhaseError

SUBCOMMANDS = {
    "pretrain": ("pretrain",),
    "prototypes": ("prototypes",),
    "continue": ("continue",),
    "fit": ("fit",),
    "plot": ("plot",),
    "run": PHASES,
}

HELP = {
    "pretrain": "train the network from scratch and save model.nnfc",
    "prototypes": "collect class prototypes and initial recall",
    "continue": "continued training with withheld classes and spaced review",
    "fit": "fit decay models to the retention series",
    "plot": "render the retention curve as SVG",
    "run": "all phases in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnforget", description="Forgetting-curve experiments: pretrain, withhold a class, review, fit, plot.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
    except ConfigurationError as exc:
        print(f"nnforget: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = Experiment(cfg).run(SUBCOMMANDS[args.command])
    except PhaseError as exc:
        print(f"nnforget: {exc}", file=sys.stderr)
        return 1
    for key, path in sorted(manifest.artifacts.items()):
        print(f"{key}\t{path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``pipeline`` command line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .corpus import CorpusError
from .nn import NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = list(pipeline.STAGES) + ["report"]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pipeline", description="Detect fraudulent reviewer groups.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--feature-blind", action="store_true", help="zero reviewer vectors at the graph model input")
    p.add_argument("--no-pruning", action="store_true", help="keep deviant reviewers when classifying groups")
    p.add_argument("--out-dir", help="override the config output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(
            args.config,
            seed=args.seed,
            out_dir=args.out_dir,
            feature_blind=True if args.feature_blind else None,
            no_pruning=True if args.no_pruning else None,
        )
        if args.command == "report":
            report = pipeline.cmd_report(cfg)
            print(pipeline.format_report(report))
            return EXIT_OK
        result = pipeline.STAGES[args.command](cfg)
    except pipeline.UsageError as exc:
        print(f"pipeline: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"pipeline: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, CorpusError, ShapeError, ValueError, KeyError) as exc:
        print(f"pipeline: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"pipeline: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

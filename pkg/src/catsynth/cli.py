"""Command line entry point: ``catsynth {simulate,synthesize,utility,risk,report}``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .dataset import DataValidationError
from . import pipeline
from .simulate import SimSpec

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catsynth",
        description="Partially synthetic categorical microdata with DPMPM, plus utility and "
                    "disclosure-risk evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "draw a dataset from a latent class simulation spec",
        "synthesize": "fit the sampler and write m partially synthetic replicates",
        "utility": "evaluate utility of the replicates",
        "risk": "evaluate disclosure risk of the replicates",
        "report": "combine manifest, utility and risk outputs into report.json",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path,
                       help="pipeline config (simulation spec for 'simulate')")
        p.add_argument("--out", type=Path, default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "simulate":
        spec = SimSpec.from_dict(pipeline.read_document(args.config))
        out = args.out if args.out is not None else args.config.parent / "simulated"
        res = pipeline.cmd_simulate(spec, out, args.seed)
        logging.getLogger("catsynth").info("wrote %s (n=%d)", res["data"], res["n"])
        return EXIT_OK
    cfg = pipeline.load_config(args.config, seed=args.seed, output=args.out)
    if args.command == "synthesize":
        pipeline.cmd_synthesize(cfg, quiet=args.quiet)
    elif args.command == "utility":
        pipeline.cmd_utility(cfg)
    elif args.command == "risk":
        pipeline.cmd_risk(cfg)
    elif args.command == "report":
        pipeline.cmd_report(cfg)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (pipeline.ConfigError, DataValidationError) as exc:
        print(f"catsynth {args.command}: {args.config}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"catsynth {args.command}: {args.config}: runtime error: {exc!r}",
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

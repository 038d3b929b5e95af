import argparse
import logging
import sys
from typing import List, Optional

import yaml

from damped_sns.experiments import RUNNERS
from damped_sns.pipeline import finalise, initialise

SUBCOMMANDS = tuple(RUNNERS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damped-sns",
        description="Stochastic Navier-Stokes with nonlinear damping: "
        "simulation, uniqueness and small-time large deviation experiments",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in SUBCOMMANDS:
        sub = subparsers.add_parser(command, help=RUNNERS[command].__doc__)
        sub.add_argument(
            "--config",
            required=True,
            help="run configuration, or the manifest of an earlier run",
        )
        sub.add_argument(
            "--seed", type=int, help="overrides run_metadata.seed"
        )
        sub.add_argument(
            "--workers", type=int, help="overrides run_metadata.workers"
        )
        sub.add_argument(
            "--out",
            help="output directory (default: $DAMPED_SNS_OUTPUT_DIR, "
            "run_metadata.output_dir, ./out)",
        )
        sub.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(
    command: str, config: str, overrides: dict, out: Optional[str]
) -> dict:
    """Opens a run, dispatches to the experiment and writes the manifest."""
    handle = initialise(config, overrides, out)
    result = RUNNERS[command](handle)
    result["manifest"] = finalise(handle)
    result["run_id"] = handle["run_id"]
    return result


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers

    try:
        result = run(args.command, args.config, overrides, args.out)
    except ValueError as err:
        # ConfigError and GateViolation included
        print(f"damped-sns: {err}", file=sys.stderr)
        return 2

    print(yaml.safe_dump(result, sort_keys=False, allow_unicode=True), end="")
    if result.get("passed") is False:
        logging.warning(
            "Failed properties: {}".format(", ".join(result["failures"]))
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``sharpminima <experiment> --config cfg.json [options]``.

Exit status is 0 on success, 1 for configuration problems and 2 for runtime or
numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import __version__, harness
from .errors import ConfigError, SharpMinimaError

log = logging.getLogger("sharpminima")

COMMANDS = {
    "train": "baseline",
    "sharpness": "sharpness_table",
    "slice": "slice",
    "sweep": "batch_sweep",
    "piggyback": "piggyback",
    "trajectory": "trajectory",
    "remedies": "remedies",
    "perfmodel": "perfmodel",
}

RUNNERS = {
    "baseline": harness.run_baseline,
    "sharpness_table": harness.run_sharpness_table,
    "slice": harness.run_slice,
    "batch_sweep": harness.run_batch_sweep,
    "piggyback": harness.run_piggyback,
    "trajectory": harness.run_trajectory,
    "remedies": harness.run_remedies,
    "perfmodel": harness.run_perfmodel,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharpminima", description="Small-batch vs large-batch sharpness experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {COMMANDS[name]} experiment")
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=None, help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="concurrent trials / sweep points")
        p.add_argument("--svg", action="store_true", help="also render SVG figures from the CSV")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    experiment = COMMANDS[args.command]
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = harness.load_config(args.config, args.seed, args.out_dir)
        declared = cfg.raw.get("experiment")
        if declared is not None and declared != experiment:
            raise ConfigError(f"config is for experiment {declared!r}, not {experiment!r}")
        t0 = time.perf_counter()
        RUNNERS[experiment](cfg, args.threads)
        log.info("%s finished in %.1f s", experiment, time.perf_counter() - t0)
        if args.svg:
            from . import plots

            for path in plots.render(experiment, cfg.out_dir):
                log.info("wrote %s", path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SharpMinimaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

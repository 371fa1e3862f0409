"""Command line entry point ``gaussperc``.

Usage::

    gaussperc {capacity,sample,percolate,rates,diameter} --config PATH --out DIR
              [--seed N] [--threads N]

Exit codes: 0 success, 2 configuration error, 3 resource error, 4 every job
failed.
"""
from __future__ import annotations

import argparse
import logging
import sys

from ._validation import ConfigError, DomainError, ResourceError
from .experiments.config import load_config
from .experiments.runner import RunFailure, run_config

EXIT_OK, EXIT_CONFIG, EXIT_RESOURCE, EXIT_FAILURE = 0, 2, 3, 4

# subcommand -> (default experiment kind, kinds the config may select instead)
COMMANDS = {
    "capacity": ("capacity", ("capacity", "capacity_table")),
    "sample": ("sample", ("sample", "covariance_validation")),
    "percolate": ("percolate", ("percolate", "correlation_length")),
    "rates": ("decay_rate", ("decay_rate",)),
    "diameter": ("diameter", ("diameter",)),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaussperc", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI experiment configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    default, allowed = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, default_kind=default).with_seed(args.seed)
        if cfg.kind not in allowed:
            raise ConfigError(f"experiment kind {cfg.kind!r} cannot run under {args.command!r}")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        report = run_config(cfg, args.out, threads=args.threads)
    except (ConfigError, DomainError) as exc:
        print(f"gaussperc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ResourceError, MemoryError) as exc:
        print(f"gaussperc: resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except RunFailure as exc:
        print(f"gaussperc: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for f in report.files:
        print(f"{args.out}/{f}")
    if report.failed:
        print(f"gaussperc: {len(report.failed)} of {report.jobs} jobs failed (see errors.csv)",
              file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

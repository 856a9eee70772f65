"""
Command-line front door.

    python3 fk.py <command> --config path [--set key=value ...] [--seed n] [--out dir]

Commands: simulate, zero-audit, measure, am, depin, residence, report.
Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 audit failure.
"""
import argparse
import logging
import sys

from chain.errors import ConfigError
from runs.commands import COMMANDS, EXIT_CONFIG, execute
from runs.config import load_run_config

logger = logging.getLogger(__name__)


def parse_args(argv):
    """Parse the command line."""
    parser = argparse.ArgumentParser(
        prog="fk",
        description="Driven elastic chain simulations, zero-set audits and invariant ensembles")
    parser.add_argument('command', choices=sorted(COMMANDS), help='What to run')
    parser.add_argument('--config', type=str, default=None, help='JSON run configuration')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one dotted configuration key (repeatable)')
    parser.add_argument('--seed', type=int, default=None, help='Master random seed')
    parser.add_argument('--out', type=str, default=None, help='Output directory')
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        config = load_run_config(args.config, args.overrides, seed=args.seed, out=args.out)
    except ConfigError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"Configuration error at '{e.key}': {e}")
        return EXIT_CONFIG

    logging.basicConfig(level=getattr(logging, config.logging.level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return execute(args.command, config)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``geli <stage> --config PATH``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, MissingPrerequisite, PipelineError, run_stages
from .reward_net import CheckpointError, NumericalError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("geli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geli", description="Reward decomposition experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run-all",):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--force", action="store_true", help="rerun even if results are up to date")
        p.add_argument("--partial", action="store_true",
                       help="continue past missing methods and emit gap rows")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        cfg.resolve_workdir()
        stages = STAGES if args.command == "run-all" else (args.command,)
        ran = run_stages(cfg, stages, force=args.force, partial=args.partial)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingPrerequisite, CheckpointError) as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_MISSING
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except PipelineError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    log.info("done; ran: %s", ", ".join(ran) if ran else "nothing (up to date)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

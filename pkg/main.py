import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from models.errors import (
    Fracphi4Error,
    MissingPrerequisite,
    NumericalFailure,
    ParameterError,
    SnapshotError,
    ValidationFailure,
)
from services.config import load_config, with_overrides
from services.runner import COMMANDS, run_command

load_dotenv()

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("fracphi4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracphi4",
        description="Fractional Phi^4 stochastic quantisation lab.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, required=True, help="run configuration file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", help="override [run] out directory")
    parser.add_argument("--no-cache", action="store_true", help="ignore cached results")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=os.getenv("FRACPHI4_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, out=args.out)
        report = run_command(args.command, cfg, no_cache=args.no_cache)
    except ValidationFailure as exc:
        for key, reason in exc.errors:
            logger.error("config %s: %s", key, reason)
        return EXIT_INVALID
    except (ParameterError, MissingPrerequisite, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (NumericalFailure, SnapshotError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL
    except Fracphi4Error as exc:
        logger.error("%s", exc)
        return EXIT_INVALID

    passed = sum(bool(v.passed) for v in report.verifiers)
    checks = f", {passed}/{len(report.verifiers)} checks passed"
    print(f"{args.command} {report.config_hash[:12]} seed={report.seed}"
          f"{checks if report.verifiers else ''}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

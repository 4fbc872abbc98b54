import argparse
import json
import sys

from core import __version__
from core.cli import include_router
from core.config import settings
from core.errors import GleasonRiskError
from core.log import configure_logging, get_logger
from routers import cohort, evaluation, patches, reports, scoring

logger = get_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gleasonrisk",
        description="Gleason-pattern risk scores, risk groups and survival reports",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", type=str.upper, default=settings.LOG_LEVEL, choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    include_router(subparsers, cohort.router)
    include_router(subparsers, patches.router)
    include_router(subparsers, scoring.router)
    include_router(subparsers, evaluation.router)
    include_router(subparsers, reports.router)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        result = args.handler(args)
    except GleasonRiskError as e:
        logger.error(f"❌ {e.detail}")
        return e.exit_code
    if result is not None:
        print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

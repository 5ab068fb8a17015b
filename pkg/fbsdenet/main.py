import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

from fbsdenet import __version__
from fbsdenet.config import settings
from fbsdenet.errors import EXIT_CONFIG, EXIT_OK, FbsdeError
from fbsdenet.monitoring.metrics import write_metrics
from fbsdenet.routes.commands import output_dir, register
from fbsdenet.schemas.run_config import load_config
from fbsdenet.workers.pool import close_pool, init_pool

logger = logging.getLogger("fbsdenet")


def configure_logging() -> None:
    logging.basicConfig(level=settings.LOG_LEVEL.upper(), format=settings.LOG_FORMAT, stream=sys.stderr)


@contextmanager
def lifespan(threads: int, out: Optional[Path]):
    # Startup
    try:
        init_pool(threads)
    except Exception as e:
        logger.error("startup failed: %s", e)
        raise

    try:
        yield
    finally:
        # Shutdown
        close_pool()
        if out is not None and out.is_dir():
            write_metrics(out)
        logger.info("run finished")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsdenet",
        description="Neural-surrogate FBSDE experiments: training, paths, loss and variance scans",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        logger.error("--threads must be >= 1, got %d", args.threads)
        return EXIT_CONFIG

    out: Optional[Path] = None
    try:
        config = load_config(args.config, seed_override=args.seed)
        out = output_dir(config, args)
        logger.info("command=%s config=%s out=%s threads=%d", args.command, args.config, out, args.threads)
        with lifespan(args.threads, out):
            args.handler(config, args)
    except FbsdeError as e:
        logger.error("%s failed (%s): %s", args.command, type(e).__name__, e)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import sys
from typing import Optional, Sequence

from align_gen_app.conf.config import settings
from align_gen_app.routes import data, diagnostics, evaluation, sampling, training
from align_gen_app.services.errors import AlignGenError, UsageError

logger = logging.getLogger("align_gen_app")


class CliParser(argparse.ArgumentParser):
    """Argument parser that reports bad usage as a UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> CliParser:
    """
    The build_parser function assembles the ``aligngen`` command line from the route modules.

    :return: The top-level parser with one subcommand per route
    """
    parser = CliParser(prog="aligngen", description="Cross-modality prior alignment on synthetic glyphs.")
    parser.add_argument("--log-level", default=settings.log_level,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help=f"logging verbosity (default: {settings.log_level})")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    for route in (data, training, sampling, evaluation, diagnostics):
        route.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    The main function parses the command line, runs the selected subcommand and maps errors to exit codes.

    :param argv: Sequence[str] | None: Arguments without the program name, ``sys.argv[1:]`` by default
    :return: 0 on success, otherwise the ``exit_code`` of the raised error
    """
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        args.handler(args)
    except AlignGenError as err:
        logger.debug("command failed", exc_info=True)
        print(f"error: {err.kind}: {err.message}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

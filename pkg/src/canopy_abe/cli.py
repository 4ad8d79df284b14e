"""Command-line entry point ``canopy-abe``.

Exit codes: 0 success, 2 invalid input or configuration, 1 internal error.
Logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import load_config
from .errors import CanopyError, ValidationError
from . import pipeline

log = logging.getLogger("canopy_abe")

COMMANDS = {
    "simulate": pipeline.run_simulate,
    "metrics": pipeline.run_metrics,
    "fit": pipeline.run_fit,
    "estimate": pipeline.run_estimate,
    "validate": pipeline.run_validate,
}

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canopy-abe",
                                     description="Area-based timber volume estimation from ALS.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--out", help="output directory (overrides [paths] output)")
    parser.add_argument("--seed", type=_seed, help="master seed (overrides [seeds] seed)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help/--version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed)
        result = COMMANDS[args.command](cfg)
    except (ValidationError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except CanopyError as exc:
        log.error("%s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    log.info("%s done: %s", args.command, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

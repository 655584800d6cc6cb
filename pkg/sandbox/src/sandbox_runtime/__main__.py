"""Standalone entry point: `python -m sandbox_runtime --whitelist math,json`."""

from __future__ import annotations

import argparse
import sys

from . import Harness


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sandbox-runtime")
    parser.add_argument(
        "--whitelist",
        default="",
        help="comma-separated top-level module names user code may import",
    )
    parser.add_argument(
        "--handshake-timeout-ms",
        type=int,
        default=10000,
        help="exit if no handshake frame arrives within this window",
    )
    args = parser.parse_args(argv)
    whitelist = [name.strip() for name in args.whitelist.split(",") if name.strip()]
    return Harness(whitelist).serve(args.handshake_timeout_ms)


if __name__ == "__main__":
    sys.exit(main())

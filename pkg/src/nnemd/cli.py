"""``nn-emd run|bench|tpa|server|client --config <path> [--seed N]
[--unsafe-override-privacy-guard]``"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .roles import EXIT_ERROR, run_all_in_one, run_bench, run_client, run_server, run_tpa

COMMANDS = {
    "run": ("all-in-one", run_all_in_one),
    "bench": ("all-in-one", run_bench),
    "tpa": ("tpa", run_tpa),
    "server": ("server", run_server),
    "client": ("client", run_client),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nn-emd", description="Training over encrypted multi-source data.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="flat TOML run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the run seed")
    ap.add_argument("--source-id", type=int, default=None, help="override source_id (client role)")
    ap.add_argument(
        "--unsafe-override-privacy-guard",
        action="store_true",
        help="train even if epochs/shuffles >= features",
    )
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    role, fn = COMMANDS[args.command]
    overrides = {"role": role, "seed": args.seed, "source_id": args.source_id}
    if args.unsafe_override_privacy_guard:
        overrides["unsafe_override_privacy_guard"] = True
    try:
        cfg = load_config(args.config, **overrides)
        return fn(cfg)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"nn-emd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``icupass --config run.yaml --stage all``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .pipeline import STAGES, Pipeline, PipelineError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icupass", description=__doc__)
    p.add_argument("stage_arg", nargs="?", metavar="STAGE", choices=STAGES + ("all",),
                   help="stage to run (same as --stage)")
    p.add_argument("--config", help="run configuration (YAML or JSON); defaults are used when omitted")
    p.add_argument("--stage", choices=STAGES + ("all",), help="stage to run (default: all)")
    p.add_argument("--seed-override", type=int, help="replace every seed in the config")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--audit-literal-rmse", action="store_true",
                   help="also report the (1/N)*sqrt(SSE) variant of rMSE")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    if args.audit_literal_rmse:
        cfg = replace(cfg, evaluation=replace(cfg.evaluation, audit_literal_rmse=True))
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.stage and args.stage_arg and args.stage != args.stage_arg:
        print("icupass: conflicting stage arguments", file=sys.stderr)
        return 2
    stage = args.stage or args.stage_arg or "all"
    try:
        Pipeline(resolve_config(args)).run(stage)
    except (ConfigError, PipelineError, ValueError, OSError) as exc:
        print(f"icupass: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``osc-qat <subcommand> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import SWEEPS, ConfigError, load_config
from .nets import CheckpointError
from .runner import (
    run_analyze,
    run_reestimate,
    run_sample_or_anneal,
    run_toy,
    run_train,
    thread_limit,
)

log = logging.getLogger("oscqat")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osc-qat", description="Weight oscillations in quantization-aware training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        return p

    toy = add("toy", "1-d toy regression: trajectories and sweeps")
    toy.add_argument("--estimator", choices=("ste", "ewgs", "psg", "dsq"), default=None)
    toy.add_argument("--dampen", type=float, default=None, help="dampening weight for the trajectory")
    toy.add_argument("--sweep", choices=SWEEPS, default=None)
    add("train", "QAT run with optional dampening or freezing")
    add("reestimate-bn", "re-estimate BN statistics of a checkpoint and report KL drift")
    sample = add("sample", "stochastic rounding of oscillating weights")
    sample.add_argument("--trials", type=int, default=None)
    add("anneal", "binary optimization of oscillating weights")
    add("analyze", "per-layer oscillation and BN drift report")
    return parser


def dispatch(args) -> dict:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    with thread_limit():
        if args.command == "toy":
            if args.dampen is not None and args.dampen < 0:
                raise ConfigError("--dampen must be >= 0")
            return run_toy(cfg, args.estimator, args.dampen, args.sweep)
        if args.command == "train":
            return run_train(cfg)
        if args.command == "reestimate-bn":
            return run_reestimate(cfg)
        if args.command == "sample":
            if args.trials is not None and args.trials < 1:
                raise ConfigError("--trials must be >= 1")
            return run_sample_or_anneal(cfg, "sample", args.trials)
        if args.command == "anneal":
            return run_sample_or_anneal(cfg, "anneal")
        return run_analyze(cfg)


def _brief(result: dict) -> dict:
    # keep stdout readable; full reports live in the output directory
    skip = {"losses", "kl_before", "layers", "kl", "log"}
    return {k: v for k, v in result.items() if k not in skip}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (CheckpointError, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    print(json.dumps(_brief(result), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

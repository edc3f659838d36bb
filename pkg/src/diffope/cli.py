"""Command-line interface.

Verbs: gen-data | train | evaluate | report | verify.  Every verb takes a
config file and an output directory; ``--seed`` overrides the config seed so
sweeps can reuse one config.  Exit codes: 0 success, 2 config error, 3
numerical abort.
"""

from __future__ import annotations

import argparse
import sys

from .config import RunConfig
from .errors import ConfigError, NumericalAbortError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffope",
        description="Off-policy evaluation with guided window diffusion")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="config file path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="worker threads for per-policy evaluation")

    p = sub.add_parser("gen-data", help="roll behavior episodes to a dataset")
    common(p)

    p = sub.add_parser("train", help="train denoiser/reward/baseline models")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("evaluate", help="run the requested estimators")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoints", required=True, help="train output directory")

    p = sub.add_parser("report", help="aggregate runs into metrics and figures")
    p.add_argument("--runs", required=True, nargs="+",
                   help="one or more evaluate output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--env-name", default="env")
    p.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for interface uniformity")
    p.add_argument("--workers", type=int, default=1, help="unused; accepted "
                   "for interface uniformity")

    p = sub.add_parser("verify", help="run the verification suite")
    common(p)

    args = parser.parse_args(argv)
    try:
        if args.verb == "gen-data":
            from .pipeline import gen_data
            gen_data(_load_config(args), args.out)
        elif args.verb == "train":
            from .pipeline import train
            train(_load_config(args), args.data, args.out)
        elif args.verb == "evaluate":
            from .pipeline import evaluate
            evaluate(_load_config(args), args.checkpoints, args.data, args.out,
                     workers=args.workers)
        elif args.verb == "report":
            from .report import report
            report(args.runs, args.out, env_name=args.env_name)
        elif args.verb == "verify":
            from .verify import run_verify
            failures = run_verify(_load_config(args), args.out)
            if failures:
                print(f"verification finished with {failures} failing check(s); "
                      "see verification.txt", file=sys.stderr)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())

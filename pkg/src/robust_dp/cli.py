"""``robust-dp`` command line.

Exit codes: 0 when every enabled check passes, 1 when a check fails,
2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import custom, kinematics, portfolio, random_suite, timeseries
from .experiments.common import ConfigError, resolve_config

RUNNERS = {
    "kinematics": (kinematics.DEFAULTS, kinematics.run_example_kinematics),
    "timeseries": (timeseries.DEFAULTS, timeseries.run_example_timeseries),
    "portfolio": (portfolio.DEFAULTS, portfolio.run_example_portfolio),
    "random-suite": (random_suite.DEFAULTS, random_suite.run_random_suite),
    "custom": (custom.DEFAULTS, custom.run_custom),
}
ALIASES = {"suite": "random-suite"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-dp",
        description="Run robust dynamic-programming experiments and property suites.",
    )
    parser.add_argument("experiment", choices=sorted([*RUNNERS, *ALIASES]), help="experiment id ('suite' = random-suite)")
    parser.add_argument("--config", type=Path, help="JSON file with experiment settings")
    parser.add_argument("--seed", type=int, help="64-bit integer seed")
    parser.add_argument("--out", help="output directory (default runs/<experiment>)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a setting, e.g. --set vi.h0=0.05 (values parsed as JSON)",
    )
    parser.add_argument("--show-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    name = ALIASES.get(args.experiment, args.experiment)
    defaults, runner = RUNNERS[name]
    try:
        file_cfg = None
        if args.config is not None:
            with args.config.open(encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        cfg = resolve_config(name, defaults, file_cfg, args.overrides, args.seed, args.out)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"robust-dp: error: {exc}", file=sys.stderr)
        return 2
    if args.show_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    try:
        art = runner(cfg)
    except ConfigError as exc:
        print(f"robust-dp: error: {exc}", file=sys.stderr)
        return 2
    width = max((len(k) for k in art.checks), default=0)
    for key, ok in art.checks.items():
        print(f"{key:<{width}}  {'PASS' if ok else 'FAIL'}")
    print(f"outputs in {art.out_dir}")
    return 0 if art.passed else 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes for check-invariance: 0 when the verdict is pass (or the run is
damped and therefore only reported), 2 on a fail verdict, 3 when the run hit
a degenerate metric, 4 for configuration problems. train and dump-factors
exit 0 or 4.
"""

import argparse
import json
import sys

from . import harness
from .errors import KfacLabError

EXIT_PASS = 0
EXIT_FAIL = 2
EXIT_DEGENERATE = 3
EXIT_CONFIG = 4


def _load_config(path: str) -> harness.ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
        return harness.ExperimentConfig.from_dict(raw)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SystemExit(f"config error: {exc}") from exc


def _cmd_check_invariance(args) -> int:
    config = _load_config(args.config)
    runner = (
        harness.run_ngd_invariance
        if config.optimizer == "ngd"
        else harness.run_invariance
    )
    report = runner(config)
    print(report.to_json())
    if report.verdict == "fail":
        return EXIT_FAIL
    if report.verdict == "degenerate":
        return EXIT_DEGENERATE
    return EXIT_PASS


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    rows = harness.run_training(config)
    csv = harness.training_csv(rows)
    if args.out == "-":
        sys.stdout.write(csv)
    else:
        with open(args.out, "w") as fh:
            fh.write(csv)
    return EXIT_PASS


def _cmd_dump_factors(args) -> int:
    config = _load_config(args.config)
    print(harness.dump_factors(config))
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kfaclab",
        description="Kronecker-factored curvature experiments on small networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "check-invariance",
        help="run an update rule on a network and its affine-transformed twin",
    )
    p.add_argument("--config", required=True, help="experiment config JSON file")
    p.set_defaults(fn=_cmd_check_invariance)

    p = sub.add_parser("train", help="run a training loop, write step,objective CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output CSV path, - for stdout")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("dump-factors", help="print Kronecker factors at init as JSON")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=_cmd_dump_factors)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_CONFIG
        raise
    except KfacLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())

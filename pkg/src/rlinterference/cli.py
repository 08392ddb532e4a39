"""Command-line entry point: one subcommand per experiment.

Settings come from an optional JSON file (``--config``) and are overridden by
flags.  Reports go to stdout as JSON; progress logging goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import runner

SUBCOMMANDS = ("demo-two-rooms", "sweep", "correlate", "validate-aei", "sbcd", "verify-bounds")


def parse_seeds(text: str) -> list[int]:
    """'3' -> [3], '0-4' -> [0..4], '1,5,7' -> [1, 5, 7]; ranges may appear in lists."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds or len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError(f"seeds must be distinct integers, got {text!r}")
    return seeds


def parse_grid(items: Sequence[str]) -> dict:
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        if not values:
            raise argparse.ArgumentTypeError(f"--grid expects KEY=V1,V2, got {item!r}")
        grid[key] = [int(v) for v in values.split(",")]
    return grid


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the same flag appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", type=Path, help="JSON experiment settings")
    p.add_argument("--out", help=f"output root (default ${runner.OUT_ENV_VAR} or ./runs)")
    p.add_argument("--seeds", type=parse_seeds, help="e.g. 0-9 or 1,4,7")
    p.add_argument("--steps", type=int, help="training steps per run")
    p.add_argument("--cadence", type=int, help="measure every k environment steps")
    p.add_argument("--desk", action="store_true", help="reduced steps and grid")
    p.add_argument("--workers", type=int, help="parallel runs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="rlinterference", parents=[common],
                                     description="Interference measurement experiments.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.add_parser("demo-two-rooms", parents=[common], help="three-stage Two-Rooms demonstration")
    for name, text in (("sweep", "hyperparameter grid"), ("correlate", "Kendall study over a sweep")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--env", choices=sorted(runner.THRESHOLDS), default=argparse.SUPPRESS)
        sp.add_argument("--grid", action="append", metavar="KEY=V1,V2", default=argparse.SUPPRESS,
                        help="restrict one hyperparameter set (repeatable)")
    sub.add_parser("validate-aei", parents=[common], help="EI vs AEI Pearson validation")
    sub.add_parser("sbcd", parents=[common], help="layer-wise interference study")
    vb = sub.add_parser("verify-bounds", parents=[common], help="tabular bound certificates")
    vb.add_argument("--n-mdps", type=int, default=200)
    vb.add_argument("--seed", type=int, default=0)
    return parser


def load_config(args: argparse.Namespace) -> runner.ExperimentConfig:
    data: dict = {}
    path: Optional[Path] = getattr(args, "config", None)
    if path is not None:
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
    for key in ("out", "seeds", "steps", "cadence", "desk", "workers", "env"):
        if hasattr(args, key):
            data[key] = getattr(args, key)
    if hasattr(args, "grid"):
        data["grid"] = {**data.get("grid", {}), **parse_grid(args.grid)}
    if args.command in ("validate-aei", "sbcd"):
        data.setdefault("env", "cartpole")
    if args.command == "demo-two-rooms":
        data["env"] = "two_rooms"
    return runner.ExperimentConfig.from_dict(data)


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "verify-bounds":
            result = runner.verify_bounds(args.n_mdps, args.seed)
            print(json.dumps(result, indent=2))
            return 0 if result["failures"] == 0 else 1
        cfg = load_config(args)
        result = runner.EXPERIMENTS[args.command](cfg)
    except (OSError, ValueError) as exc:
        print(f"rlinterference: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(_jsonable(result), indent=2))
    if isinstance(result, dict) and result.get("failures"):
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

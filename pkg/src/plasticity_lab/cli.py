"""Command line entry point: ``plasticity-lab {run,sweep,validate-hessian,make-fixtures}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, parse_config
from .numerics import RandomStream
from .runner import NumericalError, run_experiment, run_sweep, validate_hessian_approx
from .tasks import synthetic_dataset, write_idx

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _split(text: str, kind=str) -> list:
    return [kind(t.strip()) for t in text.split(",") if t.strip()]


def make_fixtures(out_dir: str, count: int = 64, side: int = 8, seed: int = 0) -> tuple[str, str]:
    """Write a small synthetic IDX image/label pair (``side`` x ``side`` images)."""
    os.makedirs(out_dir, exist_ok=True)
    ds = synthetic_dataset(10, max(1, count // 10), side * side, RandomStream(seed, 99))
    images = np.round(ds.inputs * 255).astype(np.uint8).reshape(-1, side, side)
    img = os.path.join(out_dir, "fixture-images-idx3-ubyte")
    lab = os.path.join(out_dir, "fixture-labels-idx1-ubyte")
    write_idx(img, lab, images, ds.labels.astype(np.uint8))
    return img, lab


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plasticity-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per task")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one continual-learning run and write its CSV")
    run.add_argument("--config", required=True)

    sweep = sub.add_parser("sweep", help="grid over regularizers, strengths and seeds")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--regularizers", required=True, help="comma separated, e.g. wasserstein,weight_decay")
    sweep.add_argument("--strengths", required=True, help="comma separated floats")
    sweep.add_argument("--seeds", required=True, help="comma separated ints")
    sweep.add_argument("--out-dir", default=None, help="defaults to <output stem>_sweep/")
    sweep.add_argument("--workers", type=int, default=1)

    val = sub.add_parser("validate-hessian", help="compare Hessian-rank estimators with the exact Hessian")
    val.add_argument("--config", required=True)

    fix = sub.add_parser("make-fixtures", help="write tiny IDX fixture files")
    fix.add_argument("--out-dir", default="fixtures")
    fix.add_argument("--count", type=int, default=64)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "make-fixtures":
            img, lab = make_fixtures(args.out_dir, args.count)
            print(img)
            print(lab)
            return EXIT_OK
        config = parse_config(args.config)
        if args.command == "run":
            run_experiment(config)
            print(config.output)
        elif args.command == "sweep":
            regs = _split(args.regularizers)
            strengths = _split(args.strengths, float)
            seeds = _split(args.seeds, int)
            out_dir = args.out_dir or os.path.splitext(config.output)[0] + "_sweep"
            print(run_sweep(config, regs, strengths, seeds, out_dir, workers=args.workers))
        elif args.command == "validate-hessian":
            path, _ = validate_hessian_approx(config)
            print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # I/O, data format, size guards
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

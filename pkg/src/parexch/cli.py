"""``parexch`` command line: run, bench, make-batches."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields

from .collectives import ExchangeStrategy
from .errors import ConfigError
from .harness import (
    PARAM_PRESETS,
    TRAIN_PRESETS,
    ExperimentConfig,
    bench_exchange,
    format_bench_table,
    load_config,
    make_batch_dir,
    run,
)

_CHOICES = {
    "mode": ("bsp", "easgd"),
    "scheme": ("subgd", "awagd"),
    "strategy": ("ar", "asa", "asa16"),
    "schedule": ("constant", "step", "poly"),
    "precision": ("f32", "f64"),
    "backend": ("inproc", "tcp"),
    "model": ("linear", "logistic", "mlp"),
}


def _add_run_parser(sub) -> None:
    p = sub.add_parser("run", help="train and write per-rank stats")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f.name, "default": None}
        if f.name in _CHOICES:
            kw["choices"] = _CHOICES[f.name]
        default = f.default if f.default is not MISSING else None
        kw["help"] = f"(default: {default!r})"
        p.add_argument(flag, **kw)


def _add_bench_parser(sub) -> None:
    p = sub.add_parser("bench", help="time standalone parameter exchanges")
    p.add_argument("--params", nargs="+", default=["1024"],
                   help=f"buffer lengths or presets ({', '.join(PARAM_PRESETS)})")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--strategy", nargs="+", default=[s.value for s in ExchangeStrategy],
                   choices=[s.value for s in ExchangeStrategy])
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--backend", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--json", action="store_true", help="one JSON row per line instead of a table")


def _add_batches_parser(sub) -> None:
    p = sub.add_parser("make-batches", help="write synthetic uint8 batch files")
    p.add_argument("directory")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--shape", default="3x12x12", help="CxHxW")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parexch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)
    _add_bench_parser(sub)
    _add_batches_parser(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        overrides = dict(TRAIN_PRESETS.get(args.preset, {}))
        overrides.update({f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
                          if getattr(args, f.name) is not None})
        try:
            config = load_config(args.config, overrides)
        except (ConfigError, OSError) as exc:
            print(f"parexch: {exc}", file=sys.stderr)
            return 2
        code = run(config)
        if code == 0:
            print(f"stats written to {config.out}")
        return code
    if args.command == "bench":
        rows = [bench_exchange(p, args.workers, s, args.reps, args.backend)
                for p in args.params for s in args.strategy]
        if args.json:
            for row in rows:
                print(json.dumps(row, sort_keys=True))
        else:
            print(format_bench_table(rows))
        return 0
    shape = tuple(int(v) for v in args.shape.lower().split("x"))
    names = make_batch_dir(args.directory, args.seed, args.n, shape, args.classes, args.batch_size,
                           args.difficulty)
    print(f"wrote {len(names)} batch files to {args.directory}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

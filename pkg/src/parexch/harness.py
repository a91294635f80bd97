"""Experiment configuration, orchestration, exchange benchmarks and stats files."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import collectives
from .collectives import ExchangeStrategy
from .errors import ConfigError, ParexchError, WorkerPanic
from .models import Dataset, Model, make_synthetic
from .optimizer import Schedule
from .pipeline import BatchReader, write_dataset
from .trainers import RunStats, TrainConfig, bsp_worker, easgd_server, easgd_worker, train, weight_hash
from .transport import spawn_world
from .transport.tcp import TcpCommunicator

log = logging.getLogger(__name__)

# Parameter counts of the three benchmark networks (float32 parameters).
PARAM_PRESETS = {
    "alexnet": 60_965_224,
    "googlenet": 13_378_280,
    "vggnet": 138_357_544,
}

TRAIN_PRESETS = {
    "alexnet-like": {"lr": 0.005, "batch_size": 128, "workers": 8, "schedule": "step"},
    "googlenet-like": {"lr": 0.005, "batch_size": 32, "workers": 8, "schedule": "poly"},
}

CSV_HEADER = "iter,epoch,loss,compute_s,exchange_s,bytes_sent"


@dataclass
class ExperimentConfig:
    mode: str = "bsp"
    workers: int = 2
    batch_size: int = 32
    scheme: str = "subgd"
    strategy: str = "asa"
    schedule: str = "constant"
    lr_decay_factor: float = 0.1
    lr_decay_epochs: int = 20
    poly_max_iterations: int = 0
    poly_power: float = 0.5
    lr: float = 0.05
    momentum: float = 0.0
    epochs: int = 2
    max_iterations: int = 0
    seed: int = 0
    alpha: float = 0.5
    tau: int = 1
    precision: str = "f32"
    shuffle: bool = False
    model: str = "logistic"
    hidden: int = 32
    backend: str = "inproc"
    # Empty means synthetic data; otherwise a directory of batch files.
    data_dir: str = ""
    val_dir: str = ""
    crop: str = ""
    n_train: int = 4096
    n_val: int = 1024
    input_dim: int = 16
    classes: int = 4
    difficulty: float = 0.5
    timeout: float = 30.0
    # -1 spawns every rank locally; >= 0 runs only that rank (tcp, via PAREXCH_RENDEZVOUS).
    rank: int = -1
    out: str = "runs/latest"

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _coerce(f, getattr(self, f.name)))
        if self.backend not in ("inproc", "tcp"):
            raise ConfigError(f"backend must be inproc or tcp, got {self.backend!r}")
        if self.rank >= 0 and self.backend != "tcp":
            raise ConfigError("running a single rank needs the tcp backend")
        self.train_config()  # validates the training fields

    def schedule_obj(self, total_iterations: int = 0) -> Schedule:
        if self.schedule == "poly":
            return Schedule("poly", max_iterations=self.poly_max_iterations or max(1, total_iterations),
                            power=self.poly_power)
        if self.schedule == "step":
            return Schedule("step", factor=self.lr_decay_factor, period_epochs=self.lr_decay_epochs)
        return Schedule(self.schedule)

    def train_config(self, total_iterations: int = 0) -> TrainConfig:
        try:
            return TrainConfig(
                mode=self.mode, workers=self.workers, batch_size=self.batch_size, scheme=self.scheme,
                strategy=self.strategy, schedule=self.schedule_obj(total_iterations), lr=self.lr,
                momentum=self.momentum, epochs=self.epochs, seed=self.seed, alpha=self.alpha, tau=self.tau,
                max_iterations=self.max_iterations, precision=self.precision, shuffle=self.shuffle,
                timeout=self.timeout)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def crop_shape(self) -> tuple[int, int] | None:
        if not self.crop:
            return None
        h, _, w = self.crop.lower().partition("x")
        return int(h), int(w)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    kind = _TYPES[f.type]
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    if kind is bool:
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: expected {f.type}, got {value!r}") from None


def parse_config(text: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` comments allowed); overrides win."""
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            values[key] = value
    return ExperimentConfig(**values)


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def emit_stats(stats: RunStats, path: str | os.PathLike) -> None:
    """Write per-iteration CSV at ``path`` and a one-line JSON summary beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER]
    for r in stats.records:
        lines.append(",".join([str(r.iteration), str(r.epoch), _fmt_float(r.loss), _fmt_float(r.compute_seconds),
                               _fmt_float(r.exchange_seconds), str(r.bytes_sent)]))
    path.write_text("\n".join(lines) + "\n")
    summary_path(path).write_text(json.dumps(summarize(stats), sort_keys=True) + "\n")


def summary_path(csv_path: str | os.PathLike) -> Path:
    return Path(csv_path).with_suffix(".summary.json")


def summarize(stats: RunStats) -> dict[str, Any]:
    def clean(x: float):
        return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

    final_hash = weight_hash(stats.final_weights) if stats.final_weights is not None else ""
    return {
        "rank": stats.rank,
        "role": stats.role,
        "iterations": stats.iterations,
        "final_loss": clean(stats.records[-1].loss) if stats.records else None,
        "val_loss": clean(stats.val_loss),
        "val_error": clean(stats.val_error),
        "wall_seconds": stats.wall_seconds,
        "param_messages_sent": stats.param_messages_sent,
        "final_weights_hash": final_hash,
    }


def build_data(config: ExperimentConfig) -> tuple[Model, Dataset | BatchReader, Dataset | None]:
    if config.data_dir:
        reader = BatchReader.open(config.data_dir, seed=config.seed, crop=config.crop_shape())
        probe = reader(reader.files()[0], "val", 0)
        classes = int(max(int(v.max()) for v in reader.labels.values())) + 1
        val = None
        if config.val_dir:
            vreader = BatchReader.open(config.val_dir, seed=config.seed, crop=config.crop_shape())
            batches = [vreader(f, "val", 0) for f in vreader.files()]
            val = Dataset(np.concatenate([b.x for b in batches]), np.concatenate([b.y for b in batches]), classes)
        model = Model(config.model, probe.x.shape[1], classes, config.hidden if config.model == "mlp" else 0)
        return model, reader, val
    data = make_synthetic(config.seed, config.n_train + config.n_val, config.input_dim, config.classes,
                          config.difficulty)
    train_set = Dataset(data.x[:config.n_train], data.y[:config.n_train], data.classes)
    val = Dataset(data.x[config.n_train:], data.y[config.n_train:], data.classes) if config.n_val else None
    model = Model(config.model, config.input_dim, config.classes, config.hidden if config.model == "mlp" else 0)
    return model, train_set, val


def _total_iterations(config: ExperimentConfig, train_data: Dataset | BatchReader) -> int:
    workers = config.workers
    if isinstance(train_data, BatchReader):
        per_epoch = len(train_data.files()) // workers
    else:
        per_epoch = (len(train_data) // workers) // config.batch_size
    total = per_epoch * config.epochs
    return min(total, config.max_iterations) if config.max_iterations else total


def run(config: ExperimentConfig) -> int:
    """Train per ``config`` and write stats under ``config.out``.  Returns an exit code."""
    try:
        model, train_data, val = build_data(config)
        tconf = config.train_config(_total_iterations(config, train_data))
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(serialize_config(config))
        if config.rank >= 0:
            all_stats = [_run_single_rank(config, tconf, model, train_data, val)]
        else:
            all_stats = train(tconf, model, train_data, val, backend=config.backend)
        for stats in all_stats:
            emit_stats(stats, out / f"rank{stats.rank}.csv")
    except WorkerPanic as exc:
        print(f"parexch: worker failure on rank {exc.rank}:\n{exc.cause}", file=sys.stderr)
        return 1
    except (ParexchError, OSError) as exc:
        print(f"parexch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for stats in all_stats:
        s = summarize(stats)
        log.info("rank %d (%s): %d iterations, val_loss=%s val_error=%s", stats.rank, stats.role,
                 s["iterations"], s["val_loss"], s["val_error"])
    return 0


def _run_single_rank(config: ExperimentConfig, tconf: TrainConfig, model: Model, train_data, val) -> RunStats:
    world = tconf.workers + (1 if tconf.mode == "easgd" else 0)
    comm = TcpCommunicator.connect(config.rank, world, None, config.timeout)
    try:
        if tconf.mode == "bsp":
            return bsp_worker(comm, tconf, model, train_data, val)
        if comm.rank == tconf.workers:
            return easgd_server(comm, tconf, model, val)
        return easgd_worker(comm, tconf, model, train_data, tconf.workers)
    finally:
        comm.close()


def resolve_params(p: int | str) -> int:
    if isinstance(p, int):
        return p
    if p in PARAM_PRESETS:
        return PARAM_PRESETS[p]
    try:
        return int(p)
    except ValueError:
        raise ConfigError(f"P must be an integer or one of {sorted(PARAM_PRESETS)}, got {p!r}") from None


def bench_exchange(p: int | str, k: int, strategy: ExchangeStrategy | str, repetitions: int = 3,
                   backend: str = "inproc", seed: int = 0, timeout: float = 120.0) -> dict[str, Any]:
    """Time ``repetitions`` standalone exchanges of random length-P buffers on ``k`` ranks.

    ``per_rank_bytes`` is the most element payload any rank sent in one call;
    ``rank0_bytes`` counts rank 0's payload in both directions.
    """
    p = resolve_params(p)
    strategy = ExchangeStrategy(strategy)
    reduce = collectives.reducer(strategy)

    def entry(comm):
        rng = np.random.default_rng([seed, comm.rank])
        buf = rng.uniform(-1.0, 1.0, p).astype(np.float32)
        comm.barrier()
        collectives.reset_traffic(comm)
        t0 = time.perf_counter()
        for _ in range(repetitions):
            reduce(comm, buf)
        elapsed = time.perf_counter() - t0
        return elapsed, collectives.traffic_report(comm)

    results = spawn_world(k, backend, entry, timeout=timeout)
    reports = [r for _, r in results]
    return {
        "strategy": strategy.value,
        "P": p,
        "k": k,
        "mean_seconds": max(e for e, _ in results) / repetitions,
        "per_rank_bytes": max(r.bytes_sent for r in reports) // repetitions,
        "rank0_bytes": reports[0].total // repetitions,
        "max_rank_bytes": collectives.max_rank_bytes(reports) // repetitions,
    }


def bench_table(params: list[int | str], k: int, repetitions: int = 3, backend: str = "inproc",
                strategies=tuple(ExchangeStrategy)) -> list[dict[str, Any]]:
    return [bench_exchange(p, k, s, repetitions, backend) for p in params for s in strategies]


def format_bench_table(rows: list[dict[str, Any]]) -> str:
    """One line per buffer size, one column per strategy: seconds per exchange / rank-0 bytes."""
    strategies = [s.value for s in ExchangeStrategy if any(r["strategy"] == s.value for r in rows)]
    by_p: dict[int, dict[str, dict]] = {}
    for r in rows:
        by_p.setdefault(r["P"], {})[r["strategy"]] = r
    names = {v: k for k, v in PARAM_PRESETS.items()}
    head = f"{'model':<12}{'P':>12}  " + "  ".join(f"{s.upper():>22}" for s in strategies)
    lines = [head, "-" * len(head)]
    for p, cols in by_p.items():
        cells = []
        for s in strategies:
            r = cols.get(s)
            cells.append(f"{'-':>22}" if r is None else f"{r['mean_seconds']:>10.4f}s/{r['rank0_bytes']:>10d}B")
        lines.append(f"{names.get(p, '-'):<12}{p:>12}  " + "  ".join(cells))
    return "\n".join(lines)


def make_batch_dir(directory: str | os.PathLike, seed: int, n: int, shape: tuple[int, int, int],
                   classes: int, batch_size: int, difficulty: float = 0.5) -> list[str]:
    """Write synthetic uint8 image batches, labels and a mean image to ``directory``."""
    c, h, w = shape
    data = make_synthetic(seed, n, c * h * w, classes, difficulty)
    raw = np.clip(np.rint(128.0 + 32.0 * data.x), 0, 255).astype(np.uint8).reshape(n, c, h, w)
    return write_dataset(directory, raw, data.y, batch_size)

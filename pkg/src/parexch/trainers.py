"""Synchronous (BSP) and elastic-averaging (EASGD) data-parallel training loops.

Each loop is written as a per-rank entry taking a :class:`Communicator`; the
``train_*`` wrappers start a world with :func:`spawn_world` and return the
per-rank :class:`RunStats`.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import collectives
from .buffers import check_finite
from .collectives import ExchangeStrategy
from .errors import ConfigError, NonFiniteLoss, ProtocolViolation
from .models import Batch, Dataset, Model
from .optimizer import CombineScheme, SgdState, Schedule, combine, scale_lr_for_workers, schedule_lr, sgd_step
from .pipeline import BatchReader, ParallelLoader
from .transport import spawn_world
from .transport.base import DEFAULT_TIMEOUT, Communicator

log = logging.getLogger(__name__)

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "bsp"
    workers: int = 1
    batch_size: int = 32
    scheme: CombineScheme = CombineScheme.SUBGD
    strategy: ExchangeStrategy = ExchangeStrategy.ASA
    schedule: Schedule = Schedule()
    lr: float = 0.01
    momentum: float = 0.0
    epochs: int = 1
    seed: int = 0
    alpha: float = 0.5
    tau: int = 1
    # Cap on iterations per worker; 0 runs every epoch to completion.
    max_iterations: int = 0
    precision: str = "f32"
    shuffle: bool = False
    record_weights: bool = False
    hash_every: int = 1
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        object.__setattr__(self, "scheme", CombineScheme(self.scheme))
        object.__setattr__(self, "strategy", ExchangeStrategy(self.strategy))
        if self.mode not in ("bsp", "easgd"):
            raise ConfigError(f"mode must be bsp or easgd, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.workers


@dataclass
class IterRecord:
    iteration: int
    epoch: int
    loss: float
    compute_seconds: float
    exchange_seconds: float
    bytes_sent: int
    lr: float
    weight_hash: str = ""


@dataclass
class RunStats:
    rank: int
    role: str = "worker"
    records: list[IterRecord] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    val_loss: float = float("nan")
    val_error: float = float("nan")
    wall_seconds: float = 0.0
    final_weights: np.ndarray | None = None
    trajectory: list[np.ndarray] = field(default_factory=list)
    param_messages_sent: int = 0
    param_messages_received: int = 0

    @property
    def iterations(self) -> int:
        return len(self.records)

    def hashes(self) -> list[str]:
        return [r.weight_hash for r in self.records]

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def weight_hash(w: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(w).tobytes(), digest_size=16).hexdigest()


def shard_dataset(n_items: int | Sequence, k: int, rank: int) -> list:
    """Items whose index is congruent to ``rank`` mod ``k``."""
    if not 0 <= rank < k:
        raise ValueError(f"rank {rank} outside {k} shards")
    items = range(n_items) if isinstance(n_items, int) else n_items
    return list(items[rank::k])


def broadcast_init(comm: Communicator, params: np.ndarray) -> np.ndarray:
    """Rank 0's parameters, copied to every rank."""
    out = collectives.broadcast(comm, params, root=0)
    collectives.reset_traffic(comm)
    return out


class InMemorySource:
    """Fixed-size minibatches from one shard of an in-memory dataset."""

    def __init__(self, data: Dataset, indices: Sequence[int], batch_size: int,
                 iterations_per_epoch: int, shuffle: bool = False, seed: int = 0, rank: int = 0):
        self.data = data
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.iterations_per_epoch = iterations_per_epoch
        self.shuffle = shuffle
        self.seed = seed
        self.rank = rank

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return self.indices
        return np.random.default_rng([self.seed, epoch, self.rank]).permutation(self.indices)

    def batches(self, epoch: int) -> Iterator[Batch]:
        order = self.order(epoch)
        b = self.batch_size
        for i in range(self.iterations_per_epoch):
            yield self.data.take(order[i * b:(i + 1) * b])

    def close(self) -> None:
        pass


class FileSource:
    """Batch files of one shard, prefetched by a loader thread."""

    def __init__(self, reader: BatchReader, files: Sequence[str], iterations_per_epoch: int):
        self.files = list(files)[:iterations_per_epoch]
        self.iterations_per_epoch = iterations_per_epoch
        self.loader = ParallelLoader(reader)

    def batches(self, epoch: int) -> Iterator[Batch]:
        for _, batch in self.loader.epoch(self.files, "train"):
            yield batch

    def close(self) -> None:
        self.loader.stop()


def make_source(data: Dataset | BatchReader, k: int, rank: int, config: TrainConfig):
    """Shard ``data`` for ``rank`` so that every rank runs the same number of iterations."""
    if isinstance(data, BatchReader):
        files = data.files()
        per_rank = len(files) // k
        if per_rank == 0:
            raise ConfigError(f"{len(files)} batch files cannot feed {k} workers")
        return FileSource(data, shard_dataset(files, k, rank), per_rank)
    iters = (len(data) // k) // config.batch_size
    if iters == 0:
        raise ConfigError(f"{len(data)} examples over {k} workers is less than one batch of {config.batch_size}")
    return InMemorySource(data, shard_dataset(len(data), k, rank), config.batch_size, iters,
                          config.shuffle, config.seed, rank)


def _iterate(source, config: TrainConfig) -> Iterator[tuple[int, int, Batch]]:
    """(global iteration, epoch, batch) until the epochs or the iteration cap run out."""
    it = 0
    for epoch in range(config.epochs):
        for batch in source.batches(epoch):
            if config.max_iterations and it >= config.max_iterations:
                return
            yield it, epoch, batch
            it += 1


def _step_lr(config: TrainConfig, base_lr: float, epoch: int, it: int) -> float:
    return schedule_lr(config.schedule, base_lr, epoch, it)


def _check_loss(loss: float, rank: int, it: int) -> None:
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"rank {rank}: loss {loss} at iteration {it}")


def _validate(stats: RunStats, model: Model, weights: np.ndarray, val: Dataset | None, epoch: int) -> None:
    if val is None:
        return
    metrics = model.evaluate(weights, val)
    stats.validation.append({"epoch": epoch, **metrics})
    stats.val_loss, stats.val_error = metrics["loss"], metrics["error_rate"]


def bsp_worker(comm: Communicator, config: TrainConfig, model: Model, train: Dataset | BatchReader,
               val: Dataset | None = None) -> RunStats:
    """One rank of synchronous training: local SGD step, then combine, every iteration."""
    start = time.monotonic()
    k = comm.world_size
    weights = model.init_params(config.seed, config.dtype) if comm.rank == 0 \
        else np.zeros(model.num_params, dtype=config.dtype)
    weights = broadcast_init(comm, weights)
    base_lr = scale_lr_for_workers(config.lr, k, config.scheme)
    state = SgdState(weights, base_lr, config.momentum)
    stats = RunStats(comm.rank)
    source = make_source(train, k, comm.rank, config)
    last_epoch = -1
    try:
        for it, epoch, batch in _iterate(source, config):
            if epoch != last_epoch and last_epoch >= 0 and comm.rank == 0:
                _validate(stats, model, state.weights, val, last_epoch)
            last_epoch = epoch
            state.epoch = epoch
            state.lr = _step_lr(config, base_lr, epoch, it)

            t0 = time.monotonic()
            loss, grad = model.forward_backward(state.weights, batch)
            _check_loss(loss, comm.rank, it)
            w_before, v_before = state.weights.copy(), state.velocity.copy()
            sgd_step(state, grad)
            t1 = time.monotonic()
            sent_before = comm.traffic.bytes_sent
            state.weights = combine(comm, config.scheme, config.strategy, w_before, state.weights)
            if config.momentum:
                state.velocity = combine(comm, config.scheme, config.strategy, v_before, state.velocity)
            t2 = time.monotonic()

            rec = IterRecord(it, epoch, loss, t1 - t0, t2 - t1, comm.traffic.bytes_sent - sent_before, state.lr)
            if config.hash_every and it % config.hash_every == 0:
                rec.weight_hash = weight_hash(state.weights)
            stats.records.append(rec)
            if config.record_weights:
                stats.trajectory.append(state.weights.copy())
    finally:
        source.close()
    if comm.rank == 0 and last_epoch >= 0:
        _validate(stats, model, state.weights, val, last_epoch)
    stats.final_weights = state.weights
    stats.wall_seconds = time.monotonic() - start
    return stats


# EASGD wire messages: u8 tag, then the raw parameter vector for PARAMS.
_TAG = struct.Struct("<B")
PARAMS, DONE = 0, 1


def elastic_worker_update(x: np.ndarray, center_seen: np.ndarray, alpha: float) -> np.ndarray:
    return x - alpha * (x - center_seen)


def elastic_center_update(center: np.ndarray, x_seen: np.ndarray, alpha: float) -> np.ndarray:
    return center + alpha * (x_seen - center)


def _encode_params(w: np.ndarray) -> bytes:
    return _TAG.pack(PARAMS) + w.tobytes()


def _decode_params(data: bytes, dtype) -> np.ndarray:
    if not data or data[0] != PARAMS:
        raise ProtocolViolation("expected a parameter message")
    return check_finite(np.frombuffer(data[1:], dtype=dtype).copy(), "exchanged parameters")


def easgd_worker(comm: Communicator, config: TrainConfig, model: Model, train: Dataset | BatchReader,
                 server: int) -> RunStats:
    """Local SGD with an elastic pull toward the server every ``tau`` iterations."""
    start = time.monotonic()
    k = comm.world_size - 1
    weights = model.init_params(config.seed, config.dtype) if comm.rank == 0 \
        else np.zeros(model.num_params, dtype=config.dtype)
    weights = broadcast_init(comm, weights)
    state = SgdState(weights, config.lr, config.momentum)
    stats = RunStats(comm.rank)
    source = make_source(train, k, comm.rank, config)
    try:
        for it, epoch, batch in _iterate(source, config):
            state.epoch = epoch
            state.lr = _step_lr(config, config.lr, epoch, it)
            t0 = time.monotonic()
            loss, grad = model.forward_backward(state.weights, batch)
            _check_loss(loss, comm.rank, it)
            sgd_step(state, grad)
            t1 = time.monotonic()
            sent = 0
            if (it + 1) % config.tau == 0:
                out = _encode_params(state.weights)
                center_seen = _decode_params(comm.sendrecv(server, out), config.dtype)
                state.weights = elastic_worker_update(state.weights, center_seen, config.alpha)
                stats.param_messages_sent += 1
                stats.param_messages_received += 1
                sent = len(out) - _TAG.size
            t2 = time.monotonic()
            rec = IterRecord(it, epoch, loss, t1 - t0, t2 - t1, sent, state.lr)
            if config.hash_every and it % config.hash_every == 0:
                rec.weight_hash = weight_hash(state.weights)
            stats.records.append(rec)
            if config.record_weights:
                stats.trajectory.append(state.weights.copy())
    finally:
        source.close()
        comm.send(server, _TAG.pack(DONE))
    stats.final_weights = state.weights
    stats.wall_seconds = time.monotonic() - start
    return stats


def easgd_server(comm: Communicator, config: TrainConfig, model: Model, val: Dataset | None = None) -> RunStats:
    """Hold the centre variable; serve worker exchanges one at a time, in arrival order."""
    start = time.monotonic()
    k = comm.world_size - 1
    center = broadcast_init(comm, np.zeros(model.num_params, dtype=config.dtype))
    stats = RunStats(comm.rank, role="server")
    done = 0
    while done < k:
        src, data = comm.recv_any(timeout=config.timeout)
        if data and data[0] == DONE:
            done += 1
            continue
        x_seen = _decode_params(data, config.dtype)
        comm.send(src, _encode_params(center))
        center = elastic_center_update(center, x_seen, config.alpha)
        stats.param_messages_received += 1
        stats.param_messages_sent += 1
        if config.record_weights:
            stats.trajectory.append(center.copy())
    _validate(stats, model, center, val, config.epochs - 1)
    stats.final_weights = center
    stats.wall_seconds = time.monotonic() - start
    return stats


def train_bsp(config: TrainConfig, model: Model, train: Dataset | BatchReader,
              val: Dataset | None = None, backend: str = "inproc", **world_kw) -> list[RunStats]:
    if config.mode != "bsp":
        config = replace(config, mode="bsp")
    return spawn_world(config.workers, backend,
                       lambda comm: bsp_worker(comm, config, model, train, val),
                       timeout=config.timeout, **world_kw)


def train_easgd(config: TrainConfig, model: Model, train: Dataset | BatchReader,
                val: Dataset | None = None, backend: str = "inproc", **world_kw) -> list[RunStats]:
    """Ranks ``0..k-1`` are workers, rank ``k`` the server; the server's stats come last."""
    if config.mode != "easgd":
        config = replace(config, mode="easgd")
    server = config.workers

    def entry(comm: Communicator) -> RunStats:
        if comm.rank == server:
            return easgd_server(comm, config, model, val)
        return easgd_worker(comm, config, model, train, server)

    return spawn_world(config.workers + 1, backend, entry, timeout=config.timeout, **world_kw)


def train(config: TrainConfig, model: Model, train_data: Dataset | BatchReader,
          val: Dataset | None = None, backend: str = "inproc", **world_kw) -> list[RunStats]:
    run = train_bsp if config.mode == "bsp" else train_easgd
    return run(config, model, train_data, val, backend, **world_kw)


def sequential_reference(config: TrainConfig, model: Model, train_data: Dataset) -> RunStats:
    """Single-context, transport-free run of one worker with the same config.

    BSP reduces to plain SGD over the whole dataset.  EASGD keeps its centre
    variable locally and applies the elastic update in place of the exchange.
    """
    config = replace(config, workers=1)
    weights = model.init_params(config.seed, config.dtype)
    state = SgdState(weights, config.lr, config.momentum)
    center = weights.copy()
    stats = RunStats(0, role="reference")
    source = make_source(train_data, 1, 0, config)
    for it, epoch, batch in _iterate(source, config):
        state.epoch = epoch
        state.lr = _step_lr(config, config.lr, epoch, it)
        loss, grad = model.forward_backward(state.weights, batch)
        _check_loss(loss, 0, it)
        sgd_step(state, grad)
        if config.mode == "easgd" and (it + 1) % config.tau == 0:
            center_seen, x_seen = center, state.weights
            center = elastic_center_update(center, x_seen, config.alpha)
            state.weights = elastic_worker_update(x_seen, center_seen, config.alpha)
        rec = IterRecord(it, epoch, loss, 0.0, 0.0, 0, state.lr)
        if config.hash_every and it % config.hash_every == 0:
            rec.weight_hash = weight_hash(state.weights)
        stats.records.append(rec)
        if config.record_weights:
            stats.trajectory.append(state.weights.copy())
    stats.final_weights = state.weights
    return stats

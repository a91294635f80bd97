"""Batch files on disk and a loader thread that prefetches them.

The loader and its trainer talk only through :class:`ControlMessage` traffic
on a two-rank in-process channel.  The loader reads and preprocesses the next
file into its staging slot while the trainer computes, then waits for the
trainer to ask for another file before publishing the staged batch into the
input slot.  Labels are never streamed; they are held fully in memory.
"""
from __future__ import annotations

import logging
import math
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CorruptHeader, CropLargerThanImage, ProtocolViolation, ShapeMismatch, TruncatedPayload
from .models import Batch
from .transport.base import Communicator, ControlKind, ControlMessage
from .transport.inproc import local_world

log = logging.getLogger(__name__)

BATCH_MAGIC = b"PXB1"
MEAN_MAGIC = b"PXM1"
_BATCH_HEADER = struct.Struct("<4sIIII")
_MEAN_HEADER = struct.Struct("<4sIII")
BATCH_SUFFIX = ".pxb"
LABELS_NAME = "labels.npz"
MEAN_NAME = "mean.pxm"


def batch_filename(index: int, prefix: str = "batch") -> str:
    return f"{prefix}_{index:06d}{BATCH_SUFFIX}"


def batch_index(filename: str) -> int:
    m = re.search(r"_(\d+)\.pxb$", os.path.basename(filename))
    if m is None:
        raise ValueError(f"no batch index in {filename!r}")
    return int(m.group(1))


def write_batch_file(path: str | os.PathLike, raw: np.ndarray) -> None:
    """Write an ``(n, c, h, w)`` uint8 batch."""
    raw = np.ascontiguousarray(raw)
    if raw.dtype != np.uint8 or raw.ndim != 4:
        raise ShapeMismatch(f"batch files hold (n, c, h, w) uint8, got {raw.dtype} {raw.shape}")
    if raw.shape[0] < 1:
        raise ShapeMismatch("a batch file needs at least one example")
    with open(path, "wb") as f:
        f.write(_BATCH_HEADER.pack(BATCH_MAGIC, *raw.shape))
        f.write(raw.tobytes())


def read_batch_file(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _BATCH_HEADER.size:
        raise CorruptHeader(f"{path}: {len(data)} bytes is shorter than the header")
    magic, n, c, h, w = _BATCH_HEADER.unpack_from(data)
    if magic != BATCH_MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    if n < 1:
        raise CorruptHeader(f"{path}: example count {n}")
    expected = n * c * h * w
    payload = data[_BATCH_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayload(f"{path}: {len(payload)} payload bytes, header promises {expected}")
    if len(payload) > expected:
        raise CorruptHeader(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, c, h, w).copy()


def write_mean_file(path: str | os.PathLike, mean: np.ndarray) -> None:
    mean = np.ascontiguousarray(mean, dtype="<f4")
    if mean.ndim != 3:
        raise ShapeMismatch(f"mean image must be (c, h, w), got {mean.shape}")
    if not np.all(np.isfinite(mean)):
        raise ValueError("mean image has non-finite values")
    with open(path, "wb") as f:
        f.write(_MEAN_HEADER.pack(MEAN_MAGIC, *mean.shape))
        f.write(mean.tobytes())


def read_mean_file(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _MEAN_HEADER.size:
        raise CorruptHeader(f"{path}: shorter than the header")
    magic, c, h, w = _MEAN_HEADER.unpack_from(data)
    if magic != MEAN_MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    payload = data[_MEAN_HEADER.size:]
    if len(payload) != c * h * w * 4:
        raise TruncatedPayload(f"{path}: {len(payload)} payload bytes for a {c}x{h}x{w} mean")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def batch_seed(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, index])


def preprocess(raw: np.ndarray, mean: np.ndarray, mode: str, rng_seed,
               crop: tuple[int, int] | None = None) -> np.ndarray:
    """Subtract the mean image, crop, maybe mirror, flatten to ``(n, c*ch*cw)``.

    Train mode draws one crop offset and one mirror coin (p=0.5) for the whole
    batch from ``rng_seed``; val mode takes the centre crop and never mirrors.
    """
    if mode not in ("train", "val"):
        raise ValueError(f"mode must be train or val, got {mode!r}")
    n, c, h, w = raw.shape
    if mean.shape != (c, h, w):
        raise ShapeMismatch(f"mean image {mean.shape} vs examples {(c, h, w)}")
    ch, cw = (h, w) if crop is None else crop
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise CropLargerThanImage(f"crop {ch}x{cw} from {h}x{w}")
    x = raw.astype(np.float32) - mean
    if mode == "train":
        rng = np.random.default_rng(rng_seed)
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        mirror = bool(rng.random() < 0.5)
    else:
        oy, ox, mirror = (h - ch) // 2, (w - cw) // 2, False
    x = x[:, :, oy:oy + ch, ox:ox + cw]
    if mirror:
        x = x[:, :, :, ::-1]
    return np.ascontiguousarray(x).reshape(n, -1)


def save_labels(path: str | os.PathLike, labels: dict[str, np.ndarray]) -> None:
    np.savez(path, **{Path(k).stem: np.asarray(v, dtype=np.int64) for k, v in labels.items()})


def load_labels(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


@dataclass
class BatchReader:
    """Reads one batch file and returns the preprocessed :class:`Batch`.

    ``delay`` injects artificial load latency (seconds) for overlap tests.
    """

    directory: Path
    labels: dict[str, np.ndarray]
    mean: np.ndarray
    seed: int = 0
    crop: tuple[int, int] | None = None
    delay: float = 0.0

    @classmethod
    def open(cls, directory: str | os.PathLike, **kw) -> "BatchReader":
        directory = Path(directory)
        return cls(directory, load_labels(directory / LABELS_NAME),
                   read_mean_file(directory / MEAN_NAME), **kw)

    def files(self) -> list[str]:
        return sorted(p.name for p in self.directory.glob(f"*{BATCH_SUFFIX}"))

    def __call__(self, filename: str, mode: str, epoch: int) -> Batch:
        if self.delay:
            time.sleep(self.delay)
        raw = read_batch_file(self.directory / filename)
        x = preprocess(raw, self.mean, mode, batch_seed(self.seed, epoch, batch_index(filename)), self.crop)
        y = self.labels[Path(filename).stem]
        if y.shape != (x.shape[0],):
            raise ShapeMismatch(f"{filename}: {y.size} labels for {x.shape[0]} examples")
        return Batch(x, y)


def serial_batches(reader: Callable[[str, str, int], Batch], files: Sequence[str], mode: str,
                   epoch: int) -> list[Batch]:
    """Reference stream: load every file in order on the calling thread."""
    return [reader(f, mode, epoch) for f in files]


@dataclass
class LoaderSlots:
    staging: Batch | None = None
    input: Batch | None = None
    input_name: str | None = None


def _recv_ctrl(ctrl: Communicator, peer: int) -> ControlMessage:
    return ControlMessage.decode(ctrl.recv(peer, timeout=math.inf))


def loader_loop(ctrl: Communicator, slots: LoaderSlots, reader: Callable[[str, str, int], Batch],
                peer: int = 0) -> int:
    """Run the loader side of the protocol until told to stop.

    Returns the number of files loaded.  A mode message that ends an inner
    run is kept as the next outer-loop mode rather than read again.
    """
    loaded = 0
    epochs = {"train": -1, "val": -1}
    msg = _recv_ctrl(ctrl, peer)
    while True:
        if msg.kind != ControlKind.MODE:
            raise ProtocolViolation(f"expected a mode, got {msg}")
        if msg.value == "stop":
            return loaded
        mode = msg.value
        epochs[mode] += 1
        msg = _recv_ctrl(ctrl, peer)
        if msg.kind != ControlKind.FILENAME:
            raise ProtocolViolation(f"expected the first filename, got {msg}")
        filename = msg.value
        while True:
            try:
                slots.staging = reader(filename, mode, epochs[mode])
            except Exception as exc:
                ctrl.send(peer, ControlMessage.notify(f"error: {filename}: {exc}").encode())
                raise
            staged_name = filename
            loaded += 1
            # Blocks until the trainer is done with the current input.
            msg = _recv_ctrl(ctrl, peer)
            if msg.kind == ControlKind.MODE:
                break
            if msg.kind != ControlKind.FILENAME:
                raise ProtocolViolation(f"expected a filename or mode, got {msg}")
            filename = msg.value
            slots.input, slots.input_name = slots.staging, staged_name
            ctrl.send(peer, ControlMessage.notify(staged_name).encode())


@dataclass
class PipelineStats:
    batches: int = 0
    wall_seconds: float = 0.0
    wait_seconds: float = 0.0
    compute_seconds: float = 0.0
    names: list[str] = field(default_factory=list)


class ParallelLoader:
    """Trainer-side handle on a loader thread.

    Use as a context manager; :meth:`epoch` yields batches in file order while
    the following file is being prepared in the background.
    """

    def __init__(self, reader: Callable[[str, str, int], Batch], timeout: float = 30.0):
        self.reader = reader
        self.slots = LoaderSlots()
        self._trainer, self._loader = local_world(2, timeout)
        self._error: BaseException | None = None
        self.loaded = 0
        self._thread = threading.Thread(target=self._run, name="parexch-loader", daemon=True)
        self._thread.start()
        self._stopped = False

    def _run(self) -> None:
        try:
            self.loaded = loader_loop(self._loader, self.slots, self.reader)
        except BaseException as exc:  # noqa: BLE001 - surfaced on the trainer side
            self._error = exc
            log.debug("loader failed: %s", exc)
        finally:
            self._loader.close()

    def _send(self, msg: ControlMessage) -> None:
        self._trainer.send(1, msg.encode())

    def _wait_notify(self) -> str:
        msg = ControlMessage.decode(self._trainer.recv(1))
        if msg.kind != ControlKind.NOTIFY:
            raise ProtocolViolation(f"expected notify, got {msg}")
        if msg.value.startswith("error:"):
            self._thread.join()
            raise RuntimeError(f"loader stopped with {msg.value}") from self._error
        return msg.value

    def epoch(self, files: Sequence[str], mode: str):
        """Yield ``(name, batch)`` for every file in order."""
        if not files:
            return
        self._send(ControlMessage.mode(mode))
        self._send(ControlMessage.filename(files[0]))
        for i in range(len(files)):
            # The file after the last wraps around; its staged copy is dropped
            # by the next mode message.
            self._send(ControlMessage.filename(files[(i + 1) % len(files)]))
            name = self._wait_notify()
            yield name, self.slots.input

    def stop(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self._send(ControlMessage.mode("stop"))
        self._thread.join()
        self._trainer.close()
        if self._error is not None:
            raise self._error

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def pipelined_epoch(train_step: Callable[[Batch], object], files: Sequence[str], mode: str,
                    loader: ParallelLoader) -> PipelineStats:
    """Train on ``files`` in order while the next file loads in the background."""
    stats = PipelineStats()
    start = time.monotonic()
    t_wait = start
    for name, batch in loader.epoch(files, mode):
        t0 = time.monotonic()
        stats.wait_seconds += t0 - t_wait
        train_step(batch)
        t_wait = time.monotonic()
        stats.compute_seconds += t_wait - t0
        stats.batches += 1
        stats.names.append(name)
    stats.wall_seconds = time.monotonic() - start
    return stats


def serial_epoch(train_step: Callable[[Batch], object], files: Sequence[str], mode: str,
                 reader: Callable[[str, str, int], Batch], epoch: int) -> PipelineStats:
    stats = PipelineStats()
    start = time.monotonic()
    for f in files:
        t0 = time.monotonic()
        batch = reader(f, mode, epoch)
        t1 = time.monotonic()
        train_step(batch)
        stats.wait_seconds += t1 - t0
        stats.compute_seconds += time.monotonic() - t1
        stats.batches += 1
        stats.names.append(f)
    stats.wall_seconds = time.monotonic() - start
    return stats


def write_dataset(directory: str | os.PathLike, raw: np.ndarray, labels: np.ndarray,
                  batch_size: int) -> list[str]:
    """Split ``(N, c, h, w)`` uint8 examples into batch files plus mean and labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names, label_map = [], {}
    for i, start in enumerate(range(0, len(raw), batch_size)):
        name = batch_filename(i)
        write_batch_file(directory / name, raw[start:start + batch_size])
        label_map[name] = labels[start:start + batch_size]
        names.append(name)
    write_mean_file(directory / MEAN_NAME, raw.astype(np.float64).mean(axis=0).astype(np.float32))
    save_labels(directory / LABELS_NAME, label_map)
    return names

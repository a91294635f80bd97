"""Parameter-exchange collectives over a :class:`Communicator`.

Three ways to sum a buffer across ranks:

* ``allreduce_ref`` (AR): gather to rank 0, sum there, broadcast back.
* ``asa_allreduce`` (ASA): alltoall the k slices, each rank sums the slice it
  owns, allgather the partial sums.
* ``asa16_allreduce`` (ASA16): ASA with every slice on the wire in binary16
  and the sums accumulated at full precision.

All sums run in ascending source-rank order, so AR and ASA are bit-identical
for the same inputs.  Every frame carries a header
``u32 seq | u8 collective | u8 dtype | u32 count`` that catches ranks calling
different collectives or passing buffers of different lengths.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .buffers import Slice, check_finite, from_half, partition, slice_length, to_half, unpartition
from .errors import CollectiveMismatch, LengthMismatch
from .transport.base import Communicator

_HEADER = struct.Struct("<IBBI")
HEADER_BYTES = _HEADER.size


class ExchangeStrategy(str, enum.Enum):
    AR = "ar"
    ASA = "asa"
    ASA16 = "asa16"


class CollectiveId(enum.IntEnum):
    GATHER = 1
    BCAST = 2
    ALLTOALL = 3
    ALLGATHER = 4


DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float16): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def _cid_name(cid: int) -> str:
    try:
        return CollectiveId(cid).name
    except ValueError:
        return f"collective {cid}"


def _next_seq(comm: Communicator) -> int:
    comm.collective_seq = (comm.collective_seq + 1) & 0xFFFFFFFF
    return comm.collective_seq


def _send(comm: Communicator, peer: int, seq: int, cid: CollectiveId, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    header = _HEADER.pack(seq, cid, DTYPE_CODES[arr.dtype], arr.size)
    body = arr.tobytes()
    comm.send(peer, header + body)
    comm.traffic.sent(peer, len(body))


def _recv(comm: Communicator, peer: int, seq: int, cid: CollectiveId, count: int,
          dtype) -> np.ndarray:
    data = comm.recv(peer)
    if len(data) < HEADER_BYTES:
        raise CollectiveMismatch(f"rank {comm.rank}: short frame from {peer}")
    got_seq, got_cid, code, got_count = _HEADER.unpack_from(data)
    if got_seq != seq or got_cid != cid:
        raise CollectiveMismatch(
            f"rank {comm.rank}: expected call {seq} ({cid.name}) from {peer}, "
            f"got call {got_seq} ({_cid_name(got_cid)})")
    if got_count != count:
        raise LengthMismatch(f"rank {comm.rank}: {count} elements expected from {peer}, got {got_count}")
    got_dtype = CODE_DTYPES.get(code)
    if got_dtype != np.dtype(dtype):
        raise CollectiveMismatch(f"rank {comm.rank}: dtype {got_dtype} from {peer}, expected {np.dtype(dtype)}")
    body = data[HEADER_BYTES:]
    if len(body) != count * got_dtype.itemsize:
        raise LengthMismatch(f"rank {comm.rank}: truncated payload from {peer}")
    comm.traffic.received(peer, len(body))
    return np.frombuffer(body, dtype=got_dtype).copy()


def _sum_ascending(parts: Sequence[np.ndarray], dtype) -> np.ndarray:
    acc = np.array(parts[0], dtype=dtype, copy=True)
    for part in parts[1:]:
        acc += part
    return acc


def allreduce_ref(comm: Communicator, b: np.ndarray) -> np.ndarray:
    """Elementwise sum across ranks via gather, sum at rank 0, broadcast."""
    seq = _next_seq(comm)
    k = comm.world_size
    if k == 1:
        return b.copy()
    if comm.rank != 0:
        _send(comm, 0, seq, CollectiveId.GATHER, b)
        return _recv(comm, 0, seq, CollectiveId.BCAST, b.size, b.dtype)
    parts = [b] + [_recv(comm, src, seq, CollectiveId.GATHER, b.size, b.dtype) for src in range(1, k)]
    total = check_finite(_sum_ascending(parts, b.dtype), "reduced buffer")
    for dst in range(1, k):
        _send(comm, dst, seq, CollectiveId.BCAST, total)
    return total


def broadcast(comm: Communicator, b: np.ndarray, root: int = 0) -> np.ndarray:
    """Copy of ``root``'s buffer on every rank; ``b`` fixes length and dtype elsewhere."""
    seq = _next_seq(comm)
    if comm.rank == root:
        for dst in range(comm.world_size):
            if dst != root:
                _send(comm, dst, seq, CollectiveId.BCAST, b)
        return b.copy()
    return _recv(comm, root, seq, CollectiveId.BCAST, b.size, b.dtype)


def _alltoall(comm: Communicator, seq: int, slices: Sequence[Slice | np.ndarray]) -> list[Slice]:
    k = comm.world_size
    values = [s.values if isinstance(s, Slice) else s for s in slices]
    if len(values) != k:
        raise LengthMismatch(f"rank {comm.rank}: {len(values)} slices for world of {k}")
    n = values[0].size
    if any(v.size != n for v in values):
        raise LengthMismatch(f"rank {comm.rank}: slices of unequal length")
    for dst in range(k):
        if dst != comm.rank:
            _send(comm, dst, seq, CollectiveId.ALLTOALL, values[dst])
    out = []
    for src in range(k):
        if src == comm.rank:
            out.append(Slice(comm.rank, values[src].copy()))
        else:
            out.append(Slice(comm.rank, _recv(comm, src, seq, CollectiveId.ALLTOALL, n, values[0].dtype)))
    return out


def _allgather(comm: Communicator, seq: int, s: Slice | np.ndarray) -> list[Slice]:
    values = s.values if isinstance(s, Slice) else s
    for dst in range(comm.world_size):
        if dst != comm.rank:
            _send(comm, dst, seq, CollectiveId.ALLGATHER, values)
    out = []
    for src in range(comm.world_size):
        if src == comm.rank:
            out.append(Slice(src, values.copy()))
        else:
            out.append(Slice(src, _recv(comm, src, seq, CollectiveId.ALLGATHER, values.size, values.dtype)))
    return out


def alltoall(comm: Communicator, slices: Sequence[Slice | np.ndarray]) -> list[Slice]:
    """Rank r sends its slice j to rank j and returns slice r from every rank, in rank order."""
    return _alltoall(comm, _next_seq(comm), slices)


def allgather(comm: Communicator, s: Slice | np.ndarray) -> list[Slice]:
    """Every rank returns all k slices in rank order."""
    return _allgather(comm, _next_seq(comm), s)


def asa_allreduce(comm: Communicator, b: np.ndarray) -> np.ndarray:
    """Alltoall-sum-Allgather: reduce-scatter by slices, then share the partial sums."""
    seq = _next_seq(comm)
    k = comm.world_size
    if k == 1:
        return b.copy()
    received = _alltoall(comm, seq, partition(b, k))
    mine = check_finite(_sum_ascending([s.values for s in received], b.dtype), "reduced slice")
    return unpartition(_allgather(comm, seq, mine), b.size)


def asa16_allreduce(comm: Communicator, b: np.ndarray) -> np.ndarray:
    """ASA with binary16 transfer and full-precision summation.

    Only transported slices are rounded to binary16; the slice a rank keeps
    for itself enters its sum unrounded.  The owner's reduced slice is rounded
    once before the allgather and the owner keeps that rounded copy too, so
    every rank ends with identical values.  With a single rank nothing is
    transported and the buffer is returned unrounded.
    """
    seq = _next_seq(comm)
    k = comm.world_size
    if k == 1:
        return b.copy()
    slices = partition(b, k)
    received = _alltoall(comm, seq, [to_half(s.values) for s in slices])
    parts = [slices[comm.rank].values if s_rank == comm.rank else from_half(s.values, b.dtype)
             for s_rank, s in enumerate(received)]
    mine = _sum_ascending(parts, b.dtype)
    gathered = _allgather(comm, seq, to_half(mine))
    return unpartition([from_half(s.values, b.dtype) for s in gathered], b.size)


_REDUCERS = {
    ExchangeStrategy.AR: allreduce_ref,
    ExchangeStrategy.ASA: asa_allreduce,
    ExchangeStrategy.ASA16: asa16_allreduce,
}


def reducer(strategy: ExchangeStrategy | str):
    return _REDUCERS[ExchangeStrategy(strategy)]


def allreduce(comm: Communicator, b: np.ndarray, strategy: ExchangeStrategy | str) -> np.ndarray:
    return reducer(strategy)(comm, b)


@dataclass(frozen=True)
class TrafficReport:
    rank: int
    bytes_sent: int
    bytes_received: int
    messages_sent: int

    @property
    def total(self) -> int:
        return self.bytes_sent + self.bytes_received


def traffic_report(comm: Communicator) -> TrafficReport:
    """Element payload this rank moved in collectives, headers excluded."""
    t = comm.traffic
    return TrafficReport(comm.rank, t.bytes_sent, t.bytes_received, t.messages_sent)


def max_rank_bytes(reports: Sequence[TrafficReport]) -> int:
    """Heaviest per-rank link load (sent + received) across a world."""
    return max(r.total for r in reports)


def reset_traffic(comm: Communicator) -> None:
    comm.traffic.reset()


def expected_asa_bytes(p: int, k: int, itemsize: int = 4) -> int:
    """Bytes each rank sends under ASA: (k-1) slices in each of two phases."""
    return 2 * (k - 1) * slice_length(p, k) * itemsize


def expected_ar_root_bytes(p: int, k: int, itemsize: int = 4) -> int:
    """Bytes through rank 0 under AR: (k-1) buffers in, (k-1) buffers out."""
    return 2 * (k - 1) * p * itemsize

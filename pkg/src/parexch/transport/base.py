from __future__ import annotations

import collections
import enum
import math
import queue
import struct
import time
from dataclasses import dataclass, field

from ..errors import InvalidRank, PeerClosed, ProtocolViolation, TransportTimeout

DEFAULT_TIMEOUT = 30.0

# Sentinel source rank used to wake every blocked receiver when the world aborts.
ABORT = -1

_BARRIER_ARRIVE = b"\x00parexch-barrier-arrive"
_BARRIER_RELEASE = b"\x00parexch-barrier-release"


@dataclass
class PeerCounters:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    messages_received: int = 0


@dataclass
class Counters:
    peers: dict[int, PeerCounters] = field(default_factory=lambda: collections.defaultdict(PeerCounters))

    def sent(self, peer: int, n: int) -> None:
        c = self.peers[peer]
        c.bytes_sent += n
        c.messages_sent += 1

    def received(self, peer: int, n: int) -> None:
        c = self.peers[peer]
        c.bytes_received += n
        c.messages_received += 1

    @property
    def bytes_sent(self) -> int:
        return sum(c.bytes_sent for c in self.peers.values())

    @property
    def bytes_received(self) -> int:
        return sum(c.bytes_received for c in self.peers.values())

    @property
    def messages_sent(self) -> int:
        return sum(c.messages_sent for c in self.peers.values())

    @property
    def messages_received(self) -> int:
        return sum(c.messages_received for c in self.peers.values())

    def reset(self) -> None:
        self.peers.clear()


class Communicator:
    """Rank handle over a message transport.

    Subclasses deliver ``(source, payload)`` tuples into ``self._inbox`` and
    implement ``_post``.  A ``None`` payload means the source hung up.  The
    base class keeps per-peer FIFO order, byte counters and timeouts;
    ``timeout`` bounds every blocking receive and ``math.inf`` blocks forever.
    """

    backend = "abstract"

    def __init__(self, rank: int, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        if world_size < 1 or not 0 <= rank < world_size:
            raise InvalidRank(f"rank {rank} outside world of size {world_size}")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.counters = Counters()
        # Element payload moved by collectives, excluding frame headers.
        self.traffic = Counters()
        self.collective_seq = 0
        self._inbox: queue.Queue = queue.Queue()
        self._pending: dict[int, collections.deque] = collections.defaultdict(collections.deque)
        self._closed_peers: set[int] = set()
        self._aborted = False

    def __repr__(self) -> str:
        return f"<{type(self).__name__} rank={self.rank}/{self.world_size}>"

    def _post(self, peer: int, payload: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.world_size:
            raise InvalidRank(f"peer {peer} outside world of size {self.world_size}")
        if peer == self.rank:
            raise InvalidRank(f"rank {self.rank} cannot message itself")

    def send(self, peer: int, payload: bytes) -> None:
        self._check_peer(peer)
        payload = bytes(payload)
        self._post(peer, payload)
        self.counters.sent(peer, len(payload))

    def _pull(self, deadline: float) -> tuple[int, bytes | None]:
        if deadline == math.inf:
            return self._inbox.get()
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise queue.Empty
        return self._inbox.get(timeout=remaining)

    def _deliver(self, src: int, payload: bytes) -> bytes:
        self.counters.received(src, len(payload))
        return payload

    def _handle_control(self, src: int, payload: bytes | None) -> bool:
        """Record hangups and aborts; True if the item was consumed."""
        if src == ABORT:
            self._aborted = True
            raise PeerClosed(f"rank {self.rank}: world aborted")
        if payload is None:
            self._closed_peers.add(src)
            return True
        return False

    def recv(self, peer: int, timeout: float | None = None) -> bytes:
        self._check_peer(peer)
        if self._pending[peer]:
            return self._deliver(peer, self._pending[peer].popleft())
        if self._aborted:
            raise PeerClosed(f"rank {self.rank}: world aborted")
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        while True:
            if peer in self._closed_peers:
                raise PeerClosed(f"rank {self.rank}: peer {peer} closed")
            try:
                src, payload = self._pull(deadline)
            except queue.Empty:
                raise TransportTimeout(f"rank {self.rank}: no message from {peer}") from None
            if self._handle_control(src, payload):
                continue
            if src == peer:
                return self._deliver(src, payload)
            self._pending[src].append(payload)

    def recv_any(self, timeout: float | None = None) -> tuple[int, bytes]:
        """Next message from any peer, in arrival order."""
        for src, waiting in self._pending.items():
            if waiting:
                return src, self._deliver(src, waiting.popleft())
        if self._aborted:
            raise PeerClosed(f"rank {self.rank}: world aborted")
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        while True:
            if len(self._closed_peers) == self.world_size - 1:
                raise PeerClosed(f"rank {self.rank}: all peers closed")
            try:
                src, payload = self._pull(deadline)
            except queue.Empty:
                raise TransportTimeout(f"rank {self.rank}: no message from any peer") from None
            if self._handle_control(src, payload):
                continue
            return src, self._deliver(src, payload)

    def sendrecv(self, peer: int, out: bytes) -> bytes:
        # Sends never block on the receiver (both backends buffer), so
        # send-then-receive cannot deadlock whatever order the ranks use.
        self.send(peer, out)
        return self.recv(peer)

    def barrier(self) -> None:
        """Central fan-in/fan-out barrier through rank 0: 2(k-1) messages in total."""
        if self.world_size == 1:
            return
        if self.rank == 0:
            for src in range(1, self.world_size):
                if self.recv(src) != _BARRIER_ARRIVE:
                    raise ProtocolViolation(f"rank {src} sent data while rank 0 was in a barrier")
            for dst in range(1, self.world_size):
                self.send(dst, _BARRIER_RELEASE)
        else:
            self.send(0, _BARRIER_ARRIVE)
            if self.recv(0) != _BARRIER_RELEASE:
                raise ProtocolViolation(f"rank {self.rank} got data while waiting in a barrier")


class ControlKind(enum.IntEnum):
    MODE = 0
    FILENAME = 1
    NOTIFY = 2


MODES = ("train", "val", "stop")


@dataclass(frozen=True)
class ControlMessage:
    """Trainer/loader control traffic: a mode switch, a filename, or a notify."""

    kind: ControlKind
    value: str = ""

    def __post_init__(self):
        if self.kind == ControlKind.MODE and self.value not in MODES:
            raise ValueError(f"unknown mode {self.value!r}")

    @classmethod
    def mode(cls, value: str) -> "ControlMessage":
        return cls(ControlKind.MODE, value)

    @classmethod
    def filename(cls, value: str) -> "ControlMessage":
        return cls(ControlKind.FILENAME, value)

    @classmethod
    def notify(cls, value: str = "") -> "ControlMessage":
        return cls(ControlKind.NOTIFY, value)

    def encode(self) -> bytes:
        return struct.pack("<B", self.kind) + self.value.encode("utf-8")

    @classmethod
    def decode(cls, data: bytes) -> "ControlMessage":
        if not data:
            raise ProtocolViolation("empty control message")
        try:
            kind = ControlKind(data[0])
        except ValueError:
            raise ProtocolViolation(f"unknown control kind {data[0]}") from None
        return cls(kind, data[1:].decode("utf-8"))

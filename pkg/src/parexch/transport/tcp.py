"""TCP backend: one duplex connection per unordered rank pair.

Wire format is a u32 little-endian length followed by the payload.  Rank 0
doubles as the rendezvous point: every other rank connects to it, sends a
registration frame (u32-LE rank) and a frame with its listening address, and
gets back the peer table as JSON.  The remaining pairs then connect with the
higher rank dialing the lower one and opening with its own registration frame.
"""
from __future__ import annotations

import json
import logging
import os
import socket
import struct
import threading
import time

from ..errors import PeerClosed, PeerUnreachable, ProtocolViolation
from .base import DEFAULT_TIMEOUT, Communicator

log = logging.getLogger(__name__)

RENDEZVOUS_ENV = "PAREXCH_RENDEZVOUS"
_LEN = struct.Struct("<I")


def parse_address(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


def rendezvous_from_env() -> tuple[str, int]:
    value = os.environ.get(RENDEZVOUS_ENV)
    if not value:
        raise PeerUnreachable(f"{RENDEZVOUS_ENV} is not set")
    return parse_address(value)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            return None
        got += k
    return bytes(buf)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_LEN.pack(len(payload)))
    if payload:
        sock.sendall(payload)


def read_frame(sock: socket.socket) -> bytes | None:
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n == 0:
        return b""
    return _recv_exact(sock, n)


def _read_frame_strict(sock: socket.socket, what: str) -> bytes:
    data = read_frame(sock)
    if data is None:
        raise PeerClosed(f"connection closed while reading {what}")
    return data


def _listener(host: str, port: int, backlog: int) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    s.bind((host, port))
    s.listen(backlog)
    return s


def _dial(addr: tuple[str, int], deadline: float) -> socket.socket:
    last = None
    while time.monotonic() < deadline:
        try:
            s = socket.create_connection(addr, timeout=max(0.1, deadline - time.monotonic()))
            s.settimeout(None)
            return s
        except OSError as exc:
            last = exc
            time.sleep(0.02)
    raise PeerUnreachable(f"could not reach {addr[0]}:{addr[1]}: {last}")


def _accept(listener: socket.socket, deadline: float) -> socket.socket:
    listener.settimeout(max(0.01, deadline - time.monotonic()))
    try:
        s, _ = listener.accept()
    except socket.timeout:
        raise PeerUnreachable("timed out waiting for peers to connect") from None
    s.settimeout(None)
    return s


def _register(sock: socket.socket, rank: int) -> None:
    write_frame(sock, _LEN.pack(rank))


def _read_registration(sock: socket.socket, world_size: int) -> int:
    data = _read_frame_strict(sock, "registration")
    if len(data) != 4:
        raise ProtocolViolation(f"registration frame of {len(data)} bytes")
    (rank,) = _LEN.unpack(data)
    if not 0 <= rank < world_size:
        raise ProtocolViolation(f"registration for rank {rank} in world of {world_size}")
    return rank


class TcpCommunicator(Communicator):
    backend = "tcp"

    def __init__(self, rank: int, world_size: int, socks: dict[int, socket.socket],
                 timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, world_size, timeout)
        self._socks = socks
        self._readers = []
        for peer, sock in socks.items():
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._read_loop, args=(peer, sock),
                                 name=f"parexch-rx-{rank}<-{peer}", daemon=True)
            t.start()
            self._readers.append(t)
        self._closed = False

    @classmethod
    def connect(cls, rank: int, world_size: int, rendezvous=None,
                timeout: float = DEFAULT_TIMEOUT) -> "TcpCommunicator":
        addr = rendezvous_from_env() if rendezvous is None else parse_address(rendezvous)
        deadline = time.monotonic() + timeout
        socks: dict[int, socket.socket] = {}
        if world_size == 1:
            return cls(rank, world_size, socks, timeout)
        if rank == 0:
            with _listener(addr[0], addr[1], world_size) as lst:
                table = {}
                for _ in range(world_size - 1):
                    s = _accept(lst, deadline)
                    peer = _read_registration(s, world_size)
                    table[peer] = json.loads(_read_frame_strict(s, "address"))
                    socks[peer] = s
                for s in socks.values():
                    write_frame(s, json.dumps(table).encode())
            return cls(rank, world_size, socks, timeout)

        lst = _listener("0.0.0.0", 0, world_size)
        try:
            s0 = _dial(addr, deadline)
            _register(s0, rank)
            host = s0.getsockname()[0]
            write_frame(s0, json.dumps([host, lst.getsockname()[1]]).encode())
            table = {int(r): tuple(a) for r, a in json.loads(_read_frame_strict(s0, "peer table")).items()}
            socks[0] = s0
            for lower in range(1, rank):
                s = _dial(table[lower], deadline)
                _register(s, rank)
                socks[lower] = s
            for _ in range(rank + 1, world_size):
                s = _accept(lst, deadline)
                socks[_read_registration(s, world_size)] = s
        finally:
            lst.close()
        return cls(rank, world_size, socks, timeout)

    def _read_loop(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                data = read_frame(sock)
                if data is None:
                    break
                self._inbox.put((peer, data))
        except OSError as exc:
            log.debug("rank %d: reader for %d stopped: %s", self.rank, peer, exc)
        self._inbox.put((peer, None))

    def _post(self, peer: int, payload: bytes) -> None:
        try:
            write_frame(self._socks[peer], payload)
        except OSError as exc:
            raise PeerClosed(f"rank {self.rank}: send to {peer} failed: {exc}") from exc

    def close(self, linger: float | None = None) -> None:
        """Half-close every connection, then wait for peers to do the same.

        Waiting keeps unread frames from being reset away when the process exits.
        """
        if self._closed:
            return
        self._closed = True
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        deadline = time.monotonic() + (self.timeout if linger is None else linger)
        for t in self._readers:
            t.join(max(0.0, deadline - time.monotonic()))
        for sock in self._socks.values():
            sock.close()

"""Start ``k`` rank contexts, run an entry procedure in each, collect results."""
from __future__ import annotations

import multiprocessing as mp
import queue
import threading
import time
import traceback
from typing import Any, Callable

from ..errors import WorkerPanic
from .base import DEFAULT_TIMEOUT, Communicator
from .inproc import InProcWorld
from .tcp import TcpCommunicator, free_port, parse_address

BACKENDS = ("inproc", "tcp")

Entry = Callable[[Communicator], Any]


def spawn_world(k: int, backend: str, entry: Entry, *, timeout: float = DEFAULT_TIMEOUT,
                rendezvous: str | tuple[str, int] | None = None) -> list[Any]:
    """Run ``entry(comm)`` on every rank and return the per-rank results.

    ``inproc`` runs ranks as threads of this process; ``tcp`` forks one OS
    process per rank and connects them through ``rendezvous`` (a free
    localhost port when omitted).  The first failing rank is re-raised as
    :class:`WorkerPanic` after the rest of the world is torn down.
    """
    if k < 1:
        raise ValueError(f"world size must be >= 1, got {k}")
    if backend == "inproc":
        return _spawn_inproc(k, entry, timeout)
    if backend == "tcp":
        addr = ("127.0.0.1", free_port()) if rendezvous is None else parse_address(rendezvous)
        return _spawn_tcp(k, entry, timeout, addr)
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")


def _spawn_inproc(k: int, entry: Entry, timeout: float) -> list[Any]:
    world = InProcWorld(k, timeout)
    results: list[Any] = [None] * k
    failures: list[tuple[int, BaseException, str]] = []
    lock = threading.Lock()

    def run(rank: int) -> None:
        comm = world.comms[rank]
        try:
            results[rank] = entry(comm)
        except BaseException as exc:  # noqa: BLE001 - reported with rank attribution
            with lock:
                first = not failures
                failures.append((rank, exc, traceback.format_exc()))
            if first:
                world.abort()
        finally:
            comm.close()

    threads = [threading.Thread(target=run, args=(r,), name=f"parexch-rank-{r}", daemon=True)
               for r in range(k)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        rank, exc, tb = failures[0]
        raise WorkerPanic(rank, f"{type(exc).__name__}: {exc}\n{tb}") from exc
    return results


def _tcp_rank_main(rank: int, k: int, addr: tuple[str, int], entry: Entry,
                   timeout: float, out: mp.Queue) -> None:
    comm = None
    try:
        comm = TcpCommunicator.connect(rank, k, addr, timeout)
        result = entry(comm)
    except BaseException as exc:  # noqa: BLE001
        # Report before closing: close() lingers until peers hang up.
        out.put((rank, False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"))
        if comm is not None:
            comm.close(linger=0)
        return
    comm.close()
    out.put((rank, True, result))


def _root_cause(rank: int, cause: str, out: mp.Queue, grace: float = 1.0) -> tuple[int, str]:
    """Prefer an original failure over peers that merely saw a connection drop."""
    failures = [(rank, cause)]
    deadline = time.monotonic() + grace
    while time.monotonic() < deadline and all(c.startswith("PeerClosed") for _, c in failures):
        try:
            r, ok, value = out.get(timeout=max(0.01, deadline - time.monotonic()))
        except queue.Empty:
            break
        if not ok:
            failures.append((r, value))
    for r, c in failures:
        if not c.startswith("PeerClosed"):
            return r, c
    return failures[0]


def _spawn_tcp(k: int, entry: Entry, timeout: float, addr: tuple[str, int]) -> list[Any]:
    # fork keeps closures usable as entries; results must still pickle.
    ctx = mp.get_context("fork")
    out = ctx.Queue()
    procs = [ctx.Process(target=_tcp_rank_main, args=(r, k, addr, entry, timeout, out),
                         name=f"parexch-rank-{r}", daemon=True) for r in range(k)]
    for p in procs:
        p.start()
    results: list[Any] = [None] * k
    failure = None
    try:
        for _ in range(k):
            try:
                rank, ok, value = out.get(timeout=timeout * 4)
            except queue.Empty:
                dead = [r for r, p in enumerate(procs) if not p.is_alive() and p.exitcode]
                failure = (dead[0] if dead else -1, "no result before timeout")
                break
            if not ok:
                failure = _root_cause(rank, value, out)
                break
            results[rank] = value
    finally:
        if failure is not None:
            for p in procs:
                if p.is_alive():
                    p.terminate()
        for p in procs:
            p.join(timeout)
    if failure is not None:
        raise WorkerPanic(*failure)
    return results

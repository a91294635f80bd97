"""In-process backend: one blocking inbox queue per rank, ranks run as threads."""
from __future__ import annotations

import queue

from .base import ABORT, DEFAULT_TIMEOUT, Communicator


class InProcWorld:
    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        self.world_size = world_size
        self.inboxes = [queue.Queue() for _ in range(world_size)]
        self.comms = [InProcCommunicator(self, r, timeout) for r in range(world_size)]

    def abort(self) -> None:
        """Wake every blocked receiver with PeerClosed."""
        for box in self.inboxes:
            box.put((ABORT, None))


class InProcCommunicator(Communicator):
    backend = "inproc"

    def __init__(self, world: InProcWorld, rank: int, timeout: float = DEFAULT_TIMEOUT):
        super().__init__(rank, world.world_size, timeout)
        self._world = world
        self._inbox = world.inboxes[rank]
        self._hung_up = False

    def _post(self, peer: int, payload: bytes) -> None:
        self._world.inboxes[peer].put((self.rank, payload))

    def close(self) -> None:
        if self._hung_up:
            return
        self._hung_up = True
        for peer in range(self.world_size):
            if peer != self.rank:
                self._world.inboxes[peer].put((self.rank, None))


def local_world(world_size: int, timeout: float = DEFAULT_TIMEOUT) -> list[InProcCommunicator]:
    return InProcWorld(world_size, timeout).comms

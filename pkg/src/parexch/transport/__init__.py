"""Point-to-point messaging standing in for MPI, with byte accounting."""
from .base import DEFAULT_TIMEOUT, Communicator, ControlKind, ControlMessage, Counters, PeerCounters
from .inproc import InProcCommunicator, InProcWorld, local_world
from .tcp import RENDEZVOUS_ENV, TcpCommunicator, rendezvous_from_env
from .world import BACKENDS, spawn_world

__all__ = [
    "BACKENDS",
    "DEFAULT_TIMEOUT",
    "Communicator",
    "ControlKind",
    "ControlMessage",
    "Counters",
    "InProcCommunicator",
    "InProcWorld",
    "PeerCounters",
    "RENDEZVOUS_ENV",
    "TcpCommunicator",
    "local_world",
    "rendezvous_from_env",
    "spawn_world",
]

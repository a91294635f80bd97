"""Exception hierarchy shared by every layer of the package."""


class ParexchError(Exception):
    pass


class LengthMismatch(ParexchError, ValueError):
    pass


class NonFiniteValue(ParexchError, ValueError):
    pass


class OverflowToInfinity(ParexchError, OverflowError):
    pass


class ShapeMismatch(ParexchError, ValueError):
    pass


class NonFiniteGradient(NonFiniteValue):
    pass


class NonFiniteLoss(NonFiniteValue):
    pass


# transport


class InvalidRank(ParexchError, ValueError):
    pass


class PeerUnreachable(ParexchError, ConnectionError):
    pass


class PeerClosed(ParexchError, ConnectionError):
    pass


class TransportTimeout(ParexchError, TimeoutError):
    pass


class CollectiveMismatch(ParexchError, RuntimeError):
    """Ranks disagree on which collective (or which call) is in progress."""


class WorkerPanic(ParexchError, RuntimeError):
    def __init__(self, rank: int, cause: str):
        super().__init__(f"rank {rank} failed: {cause}")
        self.rank = rank
        self.cause = cause


# data pipeline


class CorruptHeader(ParexchError, ValueError):
    pass


class TruncatedPayload(ParexchError, ValueError):
    pass


class CropLargerThanImage(ParexchError, ValueError):
    pass


class ProtocolViolation(ParexchError, RuntimeError):
    pass


class ConfigError(ParexchError, ValueError):
    pass

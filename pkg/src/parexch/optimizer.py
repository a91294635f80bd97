"""Momentum SGD, learning-rate schedules, and the two ways of merging worker steps.

SUBGD sums every worker's parameter update onto the shared pre-step weights.
AWAGD averages the post-step weights; it matches SUBGD only when its learning
rate is ``k`` times larger, which :func:`scale_lr_for_workers` encodes.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .buffers import check_finite, scale_inplace
from .collectives import ExchangeStrategy, allreduce
from .errors import LengthMismatch, NonFiniteGradient
from .transport.base import Communicator


class CombineScheme(str, enum.Enum):
    SUBGD = "subgd"
    AWAGD = "awagd"


@dataclass
class SgdState:
    weights: np.ndarray
    lr: float
    momentum: float = 0.0
    velocity: np.ndarray = field(default=None)  # type: ignore[assignment]
    iteration: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = np.zeros_like(self.weights)
        if self.velocity.shape != self.weights.shape:
            raise LengthMismatch("velocity and weights differ in length")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(state: SgdState, grad: np.ndarray) -> SgdState:
    """v <- mu*v - lr*g; w <- w + v.  Updates ``state`` in place."""
    if grad.shape != state.weights.shape:
        raise LengthMismatch(f"gradient length {grad.size} vs {state.weights.size} weights")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    v = state.velocity
    v *= state.momentum
    v -= state.lr * grad
    state.weights += v
    state.iteration += 1
    return state


@dataclass(frozen=True)
class Schedule:
    """Learning-rate policy.

    ``step``: divide by ``1/factor`` every ``period_epochs`` epochs.
    ``poly``: ``base * (1 - iteration/max_iterations) ** power``.
    """

    kind: str = "constant"
    factor: float = 0.1
    period_epochs: int = 20
    max_iterations: int = 0
    power: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "step", "poly"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "step" and not (self.factor > 0 and self.period_epochs > 0):
            raise ValueError("step schedule needs positive factor and period")
        if self.kind == "poly" and not (self.max_iterations > 0 and self.power > 0):
            raise ValueError("poly schedule needs positive max_iterations and power")


def schedule_lr(sched: Schedule, base_lr: float, epoch: int, iteration: int) -> float:
    if sched.kind == "constant":
        return base_lr
    if sched.kind == "step":
        return base_lr * sched.factor ** (epoch // sched.period_epochs)
    frac = min(iteration, sched.max_iterations) / sched.max_iterations
    return base_lr * math.pow(1.0 - frac, sched.power)


def scale_lr_for_workers(lr: float, k: int, scheme: CombineScheme | str) -> float:
    return lr * k if CombineScheme(scheme) is CombineScheme.AWAGD else lr


@dataclass(frozen=True)
class EffectiveBatch:
    per_worker_batch: int
    workers: int

    @property
    def effective(self) -> int:
        return self.per_worker_batch * self.workers


def subgd_combine(comm: Communicator, strategy: ExchangeStrategy | str,
                  w_before: np.ndarray, w_after: np.ndarray) -> np.ndarray:
    """Return ``w_before`` plus the sum of every rank's ``w_after - w_before``."""
    if w_before.shape != w_after.shape:
        raise LengthMismatch("before/after buffers differ in length")
    if comm.world_size == 1:
        # The summed update is the local update; skip the round trip through a delta.
        return w_after.copy()
    delta_sum = allreduce(comm, w_after - w_before, strategy)
    return check_finite(w_before + delta_sum, "combined weights")


def awagd_combine(comm: Communicator, strategy: ExchangeStrategy | str,
                  w_after: np.ndarray) -> np.ndarray:
    """Average ``w_after`` across ranks."""
    total = allreduce(comm, w_after, strategy)
    return scale_inplace(total, 1.0 / comm.world_size)


def combine(comm: Communicator, scheme: CombineScheme | str, strategy: ExchangeStrategy | str,
            w_before: np.ndarray, w_after: np.ndarray) -> np.ndarray:
    if CombineScheme(scheme) is CombineScheme.SUBGD:
        return subgd_combine(comm, strategy, w_before, w_after)
    return awagd_combine(comm, strategy, w_after)

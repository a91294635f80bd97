"""Data-parallel SGD with Allreduce, Alltoall-sum-Allgather and half-precision exchange."""
from .buffers import Slice, add_inplace, from_half, param_buffer, partition, scale_inplace, to_half, unpartition
from .collectives import (
    ExchangeStrategy,
    allgather,
    allreduce,
    allreduce_ref,
    alltoall,
    asa16_allreduce,
    asa_allreduce,
    traffic_report,
)
from .models import Batch, Dataset, Model, make_synthetic
from .optimizer import CombineScheme, EffectiveBatch, Schedule, SgdState, schedule_lr, sgd_step
from .trainers import RunStats, TrainConfig, sequential_reference, train, train_bsp, train_easgd
from .transport import Communicator, spawn_world

__version__ = "0.1.0"

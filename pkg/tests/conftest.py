import numpy as np
import pytest

from parexch.transport import spawn_world


def run_world(k, fn, backend="inproc", **kw):
    """Run ``fn(comm)`` on ``k`` ranks and return the per-rank results."""
    return spawn_world(k, backend, fn, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

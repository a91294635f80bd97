import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parexch import collectives as coll
from parexch.errors import WorkerPanic

from conftest import run_world


def half(x):
    return struct.unpack("<e", struct.pack("<e", x))[0]


def inputs(k, p, seed, lo=-1.0, hi=1.0, dtype=np.float32):
    return [np.random.default_rng([seed, r]).uniform(lo, hi, p).astype(dtype) for r in range(k)]


def brute_sum(bufs):
    """Elementwise sum in float64 with an explicit Python loop."""
    out = np.zeros(bufs[0].size)
    for i in range(out.size):
        out[i] = sum(float(b[i]) for b in bufs)
    return out


def reduce_all(k, bufs, fn, backend="inproc"):
    return run_world(k, lambda comm: fn(comm, bufs[comm.rank]), backend)


def test_allreduce_ref_two_ranks():
    bufs = [np.array([1, 2], np.float32), np.array([3, 4], np.float32)]
    for out in reduce_all(2, bufs, coll.allreduce_ref):
        np.testing.assert_array_equal(out, [4, 6])


def test_allreduce_zero_rank_is_identity():
    bufs = inputs(4, 9, 1)
    bufs[2] = np.zeros(9, np.float32)
    expected = brute_sum([bufs[0], bufs[1], bufs[3]])
    for out in reduce_all(4, bufs, coll.allreduce_ref):
        np.testing.assert_allclose(out, expected, rtol=1e-6)


@pytest.mark.parametrize("k", [2, 4, 8])
@pytest.mark.parametrize("p", [1, 7, 1024])
@pytest.mark.parametrize("fn", [coll.allreduce_ref, coll.asa_allreduce])
def test_sum_matches_brute_force(k, p, fn):
    bufs = inputs(k, p, seed=k * 1000 + p)
    expected = brute_sum(bufs)
    outs = reduce_all(k, bufs, fn)
    for out in outs:
        assert out.shape == (p,) and out.dtype == np.float32
        np.testing.assert_allclose(out, expected, rtol=1e-6, atol=1e-6)
        assert out.tobytes() == outs[0].tobytes()


def test_alltoall_two_rank_transpose():
    def entry(comm):
        a = [np.array([10 * comm.rank + j], np.float32) for j in range(2)]
        return [s.values[0] for s in coll.alltoall(comm, a)]

    assert run_world(2, entry) == [[0, 10], [1, 11]]


def test_alltoall_single_rank_identity():
    out = run_world(1, lambda comm: coll.alltoall(comm, [np.arange(3, dtype=np.float32)]))[0]
    np.testing.assert_array_equal(out[0].values, [0, 1, 2])


@pytest.mark.parametrize("k", [2, 3, 5, 8])
def test_alltoall_is_an_involution(k):
    def entry(comm):
        rng = np.random.default_rng([k, comm.rank])
        original = [rng.normal(size=4).astype(np.float32) for _ in range(k)]
        twice = coll.alltoall(comm, coll.alltoall(comm, original))
        return original, [s.values for s in twice]

    for original, twice in run_world(k, entry):
        for a, b in zip(original, twice):
            np.testing.assert_array_equal(a, b)


def test_alltoall_counts_no_bytes_for_local_slice():
    def entry(comm):
        coll.alltoall(comm, [np.zeros(5, np.float32)] * 3)
        return coll.traffic_report(comm)

    for rep in run_world(3, entry):
        assert rep.bytes_sent == 2 * 5 * 4 and rep.messages_sent == 2


@pytest.mark.parametrize("k", [1, 2, 4])
def test_allgather_matches_gather_at_root(k):
    def entry(comm):
        mine = np.full(3, comm.rank + 0.5, np.float32)
        return [s.values for s in coll.allgather(comm, mine)]

    outs = run_world(k, entry)
    root_view = np.concatenate([np.full(3, r + 0.5, np.float32) for r in range(k)])
    for out in outs:
        np.testing.assert_array_equal(np.concatenate(out), root_view)


def test_asa_small_sum():
    bufs = [np.array([1, 2, 3, 4], np.float32), np.array([10, 20, 30, 40], np.float32)]
    for out in reduce_all(2, bufs, coll.asa_allreduce):
        np.testing.assert_array_equal(out, [11, 22, 33, 44])


def test_asa_padding_path_exact_on_integers():
    bufs = [np.random.default_rng(r).integers(-50, 50, 7).astype(np.float32) for r in range(3)]
    exact = np.sum(np.stack(bufs).astype(np.int64), axis=0)
    asa = reduce_all(3, bufs, coll.asa_allreduce)
    ref = reduce_all(3, bufs, coll.allreduce_ref)
    for a, r in zip(asa, ref):
        np.testing.assert_array_equal(a, exact)
        np.testing.assert_array_equal(a, r)


@pytest.mark.parametrize("k", [2, 3, 4, 8])
def test_asa_bitwise_equals_ar(k):
    # both reduce in ascending rank order
    bufs = inputs(k, 101, seed=9)
    asa = reduce_all(k, bufs, coll.asa_allreduce)
    ref = reduce_all(k, bufs, coll.allreduce_ref)
    assert all(a.tobytes() == r.tobytes() for a, r in zip(asa, ref))


def test_asa16_integers_match_asa_exactly():
    k = 8
    bufs = [np.random.default_rng(r).integers(-256, 257, 50).astype(np.float32) for r in range(k)]
    for a16, a in zip(reduce_all(k, bufs, coll.asa16_allreduce), reduce_all(k, bufs, coll.asa_allreduce)):
        np.testing.assert_array_equal(a16, a)


def test_asa16_tenth_plus_tenth():
    expected = half(2 * half(0.1))
    assert expected == 0.199951171875
    bufs = [np.array([0.1], np.float32)] * 2
    for out in reduce_all(2, bufs, coll.asa16_allreduce):
        assert out[0] == np.float32(expected)


def test_asa16_overflow():
    bufs = [np.array([1e5], np.float32), np.array([1.0], np.float32)]
    with pytest.raises(WorkerPanic) as info:
        reduce_all(2, bufs, coll.asa16_allreduce)
    assert "OverflowToInfinity" in info.value.cause


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(1, 300), st.integers(0, 2**31))
def test_asa16_error_bound(k, p, seed):
    bufs = inputs(k, p, seed)
    exact = brute_sum(bufs)
    outs = reduce_all(k, bufs, coll.asa16_allreduce)
    for out in outs:
        assert out.tobytes() == outs[0].tobytes()
    stacked = np.abs(np.stack(bufs).astype(np.float64))
    # each input rounds to binary16 (relative 2**-11, absolute 2**-25 in the subnormal range),
    # then the reduced slice rounds once more; the float32 additions add a few ulps on top
    input_err = np.sum(2.0 ** -11 * stacked + 2.0 ** -25, axis=0)
    bound = input_err + 2.0 ** -11 * (np.abs(exact) + input_err) + 2.0 ** -25 + k * 2.0 ** -23 * stacked.sum(axis=0)
    assert np.all(np.abs(outs[0] - exact) <= bound)


@pytest.mark.parametrize("p,k", [(1024, 4), (1000, 3), (7, 8), (1, 2)])
def test_traffic_formulas(p, k):
    def entry(comm):
        buf = np.ones(p, np.float32)
        out = {}
        for name, fn in [("ar", coll.allreduce_ref), ("asa", coll.asa_allreduce), ("asa16", coll.asa16_allreduce)]:
            coll.reset_traffic(comm)
            fn(comm, buf)
            out[name] = coll.traffic_report(comm)
        return out

    reps = run_world(k, entry)
    for rank, r in enumerate(reps):
        assert r["asa"].bytes_sent == coll.expected_asa_bytes(p, k)
        assert r["asa"].bytes_received == coll.expected_asa_bytes(p, k)
        assert r["asa16"].bytes_sent * 2 == r["asa"].bytes_sent
        if rank:
            assert r["ar"].bytes_sent == p * 4 and r["ar"].bytes_received == p * 4
    assert reps[0]["ar"].total == coll.expected_ar_root_bytes(p, k)
    assert coll.max_rank_bytes([r["ar"] for r in reps]) == reps[0]["ar"].total


def test_traffic_worked_example():
    assert coll.expected_asa_bytes(1024, 4) == 6144
    assert coll.expected_ar_root_bytes(1024, 4) == 24576


def test_mismatched_collectives_detected():
    def entry(comm):
        buf = np.ones(4, np.float32)
        if comm.rank == 0:
            return coll.asa_allreduce(comm, buf)
        return coll.allgather(comm, buf[:2])

    with pytest.raises(WorkerPanic) as info:
        run_world(2, entry, timeout=5)
    assert "CollectiveMismatch" in info.value.cause


def test_sequence_mismatch_detected():
    def entry(comm):
        buf = np.ones(4, np.float32)
        if comm.rank == 1:
            coll.broadcast(comm, buf)  # rank 1 is one call ahead
        return coll.asa_allreduce(comm, buf)

    with pytest.raises(WorkerPanic) as info:
        run_world(2, entry, timeout=5)
    assert "CollectiveMismatch" in info.value.cause


@pytest.mark.parametrize("fn", [coll.allreduce_ref, coll.asa_allreduce])
def test_length_mismatch_detected(fn):
    def entry(comm):
        return fn(comm, np.ones(4 + comm.rank * 4, np.float32))

    with pytest.raises(WorkerPanic) as info:
        run_world(2, entry, timeout=5)
    assert "LengthMismatch" in info.value.cause or "CollectiveMismatch" in info.value.cause


def test_float64_buffers_reduce_in_float64():
    bufs = inputs(4, 33, 5, dtype=np.float64)
    for out in reduce_all(4, bufs, coll.asa_allreduce):
        assert out.dtype == np.float64
        np.testing.assert_allclose(out, brute_sum(bufs), rtol=1e-12)


def test_reducer_lookup():
    assert coll.reducer("asa16") is coll.asa16_allreduce
    assert coll.reducer(coll.ExchangeStrategy.AR) is coll.allreduce_ref
    with pytest.raises(ValueError):
        coll.reducer("ring")


def test_single_rank_collectives_are_copies():
    buf = np.array([0.1, 2.0], np.float32)
    for fn in (coll.allreduce_ref, coll.asa_allreduce, coll.asa16_allreduce):
        out = run_world(1, lambda comm: fn(comm, buf))[0]
        assert out.tobytes() == buf.tobytes() and out is not buf

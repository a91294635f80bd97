"""Flat parameter buffers: construction, arithmetic, binary16 conversion, slicing.

A parameter buffer is a 1-D numpy array holding every model parameter
concatenated.  float32 is the runtime default; float64 is accepted so the
equivalence checks can run without reordering noise.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import LengthMismatch, NonFiniteValue, OverflowToInfinity

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
HALF_MAX = 65504.0


class Slice(NamedTuple):
    """One of ``k`` equal-length sub-arrays of a partitioned buffer.

    ``owner`` is the rank responsible for reducing this sub-array.
    """

    owner: int
    values: np.ndarray


def param_buffer(values, dtype=np.float32) -> np.ndarray:
    """Copy ``values`` into a fresh contiguous 1-D buffer, rejecting NaN/Inf."""
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"parameter buffers are float32 or float64, got {dtype}")
    out = np.array(values, dtype=dtype, copy=True).reshape(-1)
    check_finite(out)
    return out


def zeros(n: int, dtype=np.float32) -> np.ndarray:
    return np.zeros(n, dtype=dtype)


def check_finite(b: np.ndarray, what: str = "buffer") -> np.ndarray:
    if not np.all(np.isfinite(b)):
        bad = int(np.flatnonzero(~np.isfinite(b))[0])
        raise NonFiniteValue(f"{what} has non-finite value {b[bad]!r} at index {bad}")
    return b


def _check_lengths(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise LengthMismatch(f"length {a.size} vs {b.size}")


def to_half(b: np.ndarray) -> np.ndarray:
    """Round every element to the nearest binary16 value (ties to even)."""
    check_finite(b)
    with np.errstate(over="ignore"):
        h = b.astype(np.float16)
    if np.isinf(h).any():
        i = int(np.flatnonzero(np.isinf(h))[0])
        raise OverflowToInfinity(f"value {b[i]!r} at index {i} exceeds binary16 range")
    return h


def from_half(h: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Widen binary16 values; exact for both float32 and float64 targets."""
    return h.astype(dtype)


def add_inplace(dst: np.ndarray, src: np.ndarray) -> np.ndarray:
    _check_lengths(dst, src)
    np.add(dst, src, out=dst, casting="same_kind")
    return dst


def scale_inplace(dst: np.ndarray, s: float) -> np.ndarray:
    if not np.isfinite(s):
        raise NonFiniteValue(f"scale factor {s!r}")
    np.multiply(dst, s, out=dst, casting="same_kind")
    return dst


def slice_length(p: int, k: int) -> int:
    return -(-p // k)


def partition(b: np.ndarray, k: int) -> list[Slice]:
    """Split into ``k`` slices of length ceil(P/k), zero-padding the tail."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = slice_length(b.size, k)
    padded = np.zeros(n * k, dtype=b.dtype)
    padded[: b.size] = b
    return [Slice(i, padded[i * n : (i + 1) * n].copy()) for i in range(k)]


def unpartition(slices: Sequence[Slice | np.ndarray], p: int) -> np.ndarray:
    """Concatenate slices and strip padding back down to ``p`` elements."""
    parts = [s.values if isinstance(s, Slice) else s for s in slices]
    lengths = {part.size for part in parts}
    if len(lengths) > 1:
        raise LengthMismatch(f"unequal slice lengths {sorted(lengths)}")
    flat = np.concatenate(parts)
    if flat.size < p:
        raise LengthMismatch(f"{flat.size} elements cannot cover P={p}")
    return flat[:p].copy()

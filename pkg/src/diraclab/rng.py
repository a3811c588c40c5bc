"""Counter-based randomness keyed by (seed, stream, index).

Every draw is a pure function of its key, so extending a window or
reordering realization tasks never changes previously drawn values.
The mixer is the SplitMix64 finalizer, applied as a chain of bijective
avalanche rounds over the key components.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + _GAMMA) & _MASK
        x = ((x ^ (x >> np.uint64(30))) * _M1) & _MASK
        x = ((x ^ (x >> np.uint64(27))) * _M2) & _MASK
        return x ^ (x >> np.uint64(31))


def _as_u64(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype.kind in "ui":
        return arr.astype(np.int64, copy=False).view(np.uint64) if arr.dtype.kind == "i" else arr.astype(np.uint64)
    raise TypeError(f"integer key component required, got dtype {arr.dtype}")


def key_hash(seed: int, stream, index) -> np.ndarray:
    """64-bit hash of (seed, stream, index); broadcasts over stream/index."""
    h = _mix64(_as_u64(np.int64(seed)))
    h = _mix64(h ^ _mix64(_as_u64(stream)))
    return _mix64(h ^ _mix64(_as_u64(index)))


def uniform01(seed: int, stream, index) -> np.ndarray:
    """Deterministic uniforms in [0, 1) with 53-bit resolution."""
    h = key_hash(seed, stream, index)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53

"""Deterministic counter-based random streams.

Every randomized operation in this package draws from a stateless hash of
(seed, purpose, level, sweep, x, y, draw index). There is no sequential RNG
state, so a run is reproducible for a fixed seed regardless of how work is
scheduled across strips or threads, and single-threaded runs are bit-identical
across repeats.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# splitmix64 constants
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = np.float64(1.0 / (1 << 53))

# purpose tags keeping draw streams disjoint across phases
PURPOSE_INIT = np.uint64(0x11)
PURPOSE_SWEEP = np.uint64(0x22)
PURPOSE_KNN_INIT = np.uint64(0x33)
PURPOSE_KNN_SWEEP = np.uint64(0x44)
PURPOSE_GNNF_INIT = np.uint64(0x55)
PURPOSE_GNNF_SWEEP = np.uint64(0x66)
PURPOSE_WEB = np.uint64(0x77)
PURPOSE_MISC = np.uint64(0x88)


@njit(inline="always", cache=True)
def mix64(z):
    """splitmix64 finalizer; uint64 in, well-mixed uint64 out."""
    z = z + _GAMMA
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(inline="always", cache=True)
def stream_key(seed, purpose, level, sweep, x, y):
    """Key for one coordinate's draw stream within one phase."""
    h = mix64(np.uint64(seed) ^ (purpose * _GAMMA))
    h = mix64(h ^ np.uint64(level))
    h = mix64(h ^ np.uint64(sweep))
    h = mix64(h ^ (np.uint64(x) * _M1))
    h = mix64(h ^ (np.uint64(y) * _M2))
    return h


@njit(inline="always", cache=True)
def draw_u64(key, idx):
    return mix64(key + np.uint64(idx) * _GAMMA)


@njit(inline="always", cache=True)
def draw_u01(key, idx):
    """Uniform float64 in [0, 1)."""
    return np.float64(draw_u64(key, idx) >> _S11) * _INV53


@njit(inline="always", cache=True)
def draw_int(key, idx, n):
    """Uniform integer in [0, n); n must be >= 1."""
    v = np.int64(draw_u01(key, idx) * np.float64(n))
    if v >= n:
        v = np.int64(n - 1)
    return v


@njit(inline="always", cache=True)
def draw_pm1(key, idx):
    """Uniform float64 in [-1, 1]."""
    return 2.0 * draw_u01(key, idx) - 1.0


_MASK64 = (1 << 64) - 1


def py_mix64(z: int) -> int:
    """Python mirror of mix64 for non-kernel code paths."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def py_stream_key(seed: int, purpose: int, level: int, sweep: int, x: int, y: int) -> int:
    h = py_mix64((seed & _MASK64) ^ ((purpose * 0x9E3779B97F4A7C15) & _MASK64))
    h = py_mix64(h ^ (level & _MASK64))
    h = py_mix64(h ^ (sweep & _MASK64))
    h = py_mix64(h ^ ((x * 0xBF58476D1CE4E5B9) & _MASK64))
    h = py_mix64(h ^ ((y * 0x94D049BB133111EB) & _MASK64))
    return h


def py_draw_u01(key: int, idx: int) -> float:
    v = py_mix64((key + idx * 0x9E3779B97F4A7C15) & _MASK64)
    return (v >> 11) * (1.0 / (1 << 53))


def py_draw_int(key: int, idx: int, n: int) -> int:
    v = int(py_draw_u01(key, idx) * float(n))
    return n - 1 if v >= n else v

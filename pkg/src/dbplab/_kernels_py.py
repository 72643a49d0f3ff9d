"""Pure-numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` must produce the same
integer streams and the same permutations.
"""
import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform_stream(key, n):
    """``n`` uniforms in [0, 1) from counters 1..n under ``key`` (53-bit resolution)."""
    counters = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + counters * np.uint64(GOLDEN)
        bits = _mix64(z)
    return (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53


def gaussian_fill(key, n):
    """``n`` standard normals by Box-Muller over consecutive uniform pairs."""
    pairs = (n + 1) // 2
    u = uniform_stream(key, 2 * pairs)
    u1 = u[0::2]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = _TWO_PI * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def stable_argsort_rows(values):
    """Row-wise ascending argsort; ties keep flat-index order."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    return np.argsort(values, axis=1, kind="stable").astype(np.int64)

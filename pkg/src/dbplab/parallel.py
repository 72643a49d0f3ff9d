"""Chunked map over sample indices with a thread pool.

Chunk boundaries depend only on ``chunk_size``, never on the worker count,
so every chunk runs the same numpy calls on the same batch shapes whether it
executes on 1 thread or 8. Results are reassembled in index order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence

import numpy as np


def chunks(n: int, chunk_size: int) -> List[np.ndarray]:
    return [np.arange(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]


def map_chunks(fn: Callable[[np.ndarray], object], n: int, chunk_size: int = 64, workers: int = 1) -> list:
    """Apply ``fn(index_array)`` to every chunk; returns results in chunk order."""
    parts = chunks(n, chunk_size)
    if workers <= 1 or len(parts) <= 1:
        return [fn(idx) for idx in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


def concat(results: Sequence, axis: int = 0):
    """Concatenate per-chunk arrays, or tuples of arrays field by field."""
    if results and isinstance(results[0], tuple):
        return tuple(np.concatenate([r[i] for r in results], axis=axis) for i in range(len(results[0])))
    return np.concatenate(results, axis=axis)

"""Worker pool for voxel-parallel work.

Chunk boundaries depend only on the problem size, never on the worker
count, so every result is bit-identical for any number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 1 << 16

_workers = 1
_pool: ThreadPoolExecutor | None = None


def set_workers(n: int | None) -> int:
    """Set the number of worker threads (``None`` or 0 means all CPUs)."""
    global _workers, _pool
    if not n:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValueError("worker count must be positive")
    if n != _workers and _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
    _workers = int(n)
    return _workers


def get_workers() -> int:
    return _workers


def _executor() -> ThreadPoolExecutor:
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=_workers)
    return _pool


def chunked(func, n_items: int, out_shape_tail=(), dtype=np.float64, chunk: int = CHUNK):
    """Evaluate ``func(start, stop)`` over fixed chunks of ``range(n_items)``.

    ``func`` must return an array whose leading axis has ``stop - start``
    rows; the rows are written into one output array.
    """
    out = np.empty((n_items,) + tuple(out_shape_tail), dtype=dtype)
    bounds = [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]

    def run(b):
        out[b[0]:b[1]] = func(*b)

    if _workers == 1 or len(bounds) == 1:
        for b in bounds:
            run(b)
    else:
        list(_executor().map(run, bounds))
    return out

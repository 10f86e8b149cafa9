"""Slab-level thread parallelism shared by the voxel-wise kernels.

Work is split into fixed slabs whose boundaries do not depend on the thread
count, so outputs are bit-identical for any number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads: int | None = None

SLAB = 16


def set_threads(n: int | None) -> None:
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def get_threads() -> int:
    return _threads or os.cpu_count() or 1


def slabs(n: int, size: int = SLAB) -> list[tuple[int, int]]:
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def run_slabs(fn, n: int, size: int = SLAB) -> list:
    """Call ``fn(start, stop)`` for every slab of ``range(n)``; results in slab order."""
    parts = slabs(n, size)
    workers = min(get_threads(), len(parts))
    if workers <= 1:
        return [fn(a, b) for a, b in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), parts))

"""Fixed-chunk data parallelism over contiguous element ranges."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

DEFAULT_CHUNK = 1 << 18

_pools: dict[int, ThreadPoolExecutor] = {}


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _pool(threads: int) -> ThreadPoolExecutor:
    pool = _pools.get(threads)
    if pool is None:
        pool = _pools[threads] = ThreadPoolExecutor(threads, thread_name_prefix="kernel")
    return pool


def chunk_ranges(n: int, chunk: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def run_chunked(n: int, fn: Callable[[int, int], None], threads: Optional[int] = None,
                chunk: int = DEFAULT_CHUNK) -> None:
    """Call ``fn(lo, hi)`` for every fixed-size range of ``[0, n)``.

    Chunk boundaries depend only on ``chunk``, never on the thread count,
    so element-wise kernels give bitwise-identical results for any
    ``threads``.
    """
    ranges = chunk_ranges(n, chunk)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(ranges) <= 1:
        for lo, hi in ranges:
            fn(lo, hi)
        return
    for fut in [_pool(threads).submit(fn, lo, hi) for lo, hi in ranges]:
        fut.result()

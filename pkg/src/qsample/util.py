"""Deterministic chunked execution helpers.

Work is split into fixed-size chunks and results are combined in chunk
order, so outputs are bit-identical no matter how many worker threads run
the chunks.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["default_threads", "chunk_ranges", "run_chunked"]

_ENV_VAR = "QSAMPLE_THREADS"


def default_threads() -> int:
    """Worker-thread default: the QSAMPLE_THREADS environment variable, else 1."""
    try:
        return max(1, int(os.environ.get(_ENV_VAR, "1")))
    except ValueError:
        return 1


def chunk_ranges(total: int, chunk: int):
    """Fixed (start, stop) ranges covering [0, total); independent of workers."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return [(s, min(s + chunk, total)) for s in range(0, total, chunk)]


def run_chunked(fn, total: int, chunk: int, threads: int | None = None) -> list:
    """Apply ``fn(start, stop)`` to every chunk; results returned in chunk order."""
    ranges = chunk_ranges(total, chunk)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(ranges) <= 1:
        return [fn(s, e) for s, e in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: fn(r[0], r[1]), ranges))

"""Deterministic chunked execution of per-path work.

Reductions and reports must be bit-identical whatever the worker count, so
the batch is always split into the same fixed number of chunks; ``workers``
only decides how many threads service them.  Chunk functions must be
elementwise across paths (each path's result independent of the others),
which every shipped coefficient and kernel satisfies.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable

#: Chunk count is fixed so that chunk boundaries never depend on ``workers``.
NUM_CHUNKS = 16


def chunk_bounds(num_items: int, num_chunks: int = NUM_CHUNKS) -> list[tuple[int, int]]:
    """Split ``range(num_items)`` into at most ``num_chunks`` contiguous spans."""
    if num_items <= 0:
        return []
    n = min(num_chunks, num_items)
    step = num_items // n
    rem = num_items % n
    bounds = []
    lo = 0
    for i in range(n):
        hi = lo + step + (1 if i < rem else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def run_chunked(work: Callable[[int, int], None], num_items: int, workers: int = 1) -> None:
    """Run ``work(lo, hi)`` over fixed chunks, optionally on a thread pool.

    ``work`` writes into caller-preallocated arrays on disjoint row spans, so
    no combine step exists and the result cannot depend on scheduling order.
    Exceptions are re-raised for the lowest failing chunk to keep error
    reporting deterministic as well.
    """
    bounds = chunk_bounds(num_items)
    if workers <= 1 or len(bounds) <= 1:
        for lo, hi in bounds:
            work(lo, hi)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(work, lo, hi) for lo, hi in bounds]
        for fut in futures:  # submission order == chunk order
            exc = fut.exception()
            if exc is not None:
                raise exc

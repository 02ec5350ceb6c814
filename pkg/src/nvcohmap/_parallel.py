from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "COHMAP_THREADS"


def resolve_threads(n_threads=None) -> int:
    """Explicit count, else ``$COHMAP_THREADS``, else 1."""
    if n_threads is None:
        env = os.environ.get(THREADS_ENV)
        n_threads = int(env) if env else 1
    n_threads = int(n_threads)
    if n_threads < 1:
        raise ValueError(f"thread count must be >= 1, got {n_threads}")
    return n_threads


def parallel_map(fn, items, n_threads=None) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved.

    Work items must write to disjoint outputs; results never depend on
    scheduling.
    """
    items = list(items)
    n = min(resolve_threads(n_threads), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))

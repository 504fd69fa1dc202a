"""Order-preserving job dispatch.

Every job carries its own seed, so results depend only on the job index and
never on the number of workers or on scheduling.  Kernels release the GIL,
so threads give real parallelism.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def map_jobs(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

"""Order-preserving process pool map with single-threaded BLAS.

BLAS is pinned to one thread both in the parent and in workers so that the
floating-point reduction order, and hence every output byte, does not depend
on the number of jobs.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def _init_worker():
    threadpool_limits(1)


def _call(args):
    fn, item = args
    return fn(item)


def pmap(fn, items, jobs: int | None = 1) -> list:
    """``[fn(x) for x in items]``, optionally across ``jobs`` processes."""
    items = list(items)
    jobs = default_jobs() if jobs is None else int(jobs)
    with threadpool_limits(1):
        if jobs <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ProcessPoolExecutor(max_workers=min(jobs, len(items)),
                                 initializer=_init_worker) as pool:
            return list(pool.map(_call, [(fn, x) for x in items]))

"""Batch scheduling over path indices with deterministic aggregation."""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_cap():
    """Worker count: PATHFLOW_THREADS if set, else the CPU count."""
    env = os.environ.get("PATHFLOW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def batch_ranges(n_paths, batch):
    return [(s, min(batch, n_paths - s)) for s in range(0, n_paths, batch)]


def map_batches(fn, n_paths, batch):
    """Apply fn(start, count) to consecutive path batches; results in index order."""
    ranges = batch_ranges(n_paths, batch)
    workers = min(thread_cap(), len(ranges))
    if workers <= 1:
        return [fn(s, c) for s, c in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda sc: fn(*sc), ranges))

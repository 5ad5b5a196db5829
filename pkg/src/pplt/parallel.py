import os
from concurrent.futures import ThreadPoolExecutor


def max_workers():
    """Worker cap from ``PPLT_THREADS``; defaults to the available cores."""
    env = os.environ.get("PPLT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


def parallel_map(fn, items, workers=None):
    """``[fn(x) for x in items]`` on a thread pool; result order follows ``items``."""
    items = list(items)
    workers = min(workers or max_workers(), len(items)) or 1
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

"""Thread-pool helpers. KASCADE_THREADS caps worker count (default 1)."""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    raw = os.environ.get("KASCADE_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn, items):
    """Ordered map over items, threaded when KASCADE_THREADS > 1.

    Everything mapped here is a pure function over immutable inputs, so
    results are identical regardless of worker count.
    """
    items = list(items)
    workers = min(thread_count(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))

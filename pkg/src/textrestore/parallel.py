"""Order-preserving parallel map over per-image work (threads; the heavy
kernels in cv2/numpy/torch release the GIL). Results are identical to the
sequential path regardless of job count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))

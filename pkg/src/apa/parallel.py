"""Worker-count policy and a process-pool map that degrades to a loop."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count(default: int = 1) -> int:
    """Workers allowed by ``APA_THREADS`` (``default`` when unset)."""
    raw = os.environ.get("APA_THREADS")
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"APA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"APA_THREADS must be >= 1, got {n}")
    return n


def parallel_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, spread over processes when more than one worker is allowed.

    Results keep input order, so output does not depend on scheduling.
    """
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))

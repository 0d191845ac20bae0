from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def batches(n: int, size: int) -> list[np.ndarray]:
    """Fixed partition of ``range(n)`` into consecutive index blocks."""
    size = max(int(size), 1)
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def map_batches(fn, parts, workers: int = 1) -> list:
    """Apply ``fn`` to every batch, returning results in batch order.

    Merging happens in the caller in list order, so results do not depend on
    ``workers``.
    """
    if workers <= 1 or len(parts) <= 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))

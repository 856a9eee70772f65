"""
Ordered fan-out over a thread pool for ensemble members, pair sums and
sweep blocks.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunked(items: Sequence[T], chunk_size: int) -> List[Sequence[T]]:
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    return [items[i:i + chunk_size] for i in range(0, len(items), chunk_size)]


def ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1,
                chunk_size: int = 64) -> List[R]:
    """
    Apply fn to every item and return results in input order.

    workers=1 runs inline. Otherwise items are submitted in chunks; the
    first exception raised by any item propagates after its chunk finishes.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List[R] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for chunk in chunked(items, chunk_size):
            futures = [pool.submit(fn, item) for item in chunk]
            results.extend(f.result() for f in futures)
    logger.debug(f"ordered_map: {len(items)} items on {workers} workers")
    return results

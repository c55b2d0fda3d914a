"""
Worker pool helpers.
Runs per-item pipeline work (rendering, synthesis, feature extraction) in parallel.
"""

import time
import logging
from typing import Callable, Any, Optional
from concurrent.futures import ThreadPoolExecutor, as_completed

from .config import MAX_WORKERS

logger = logging.getLogger(__name__)


# =============================================================================
# PARALLEL MAP
# =============================================================================

def parallel_map(
    fn: Callable[[Any], Any],
    items: list,
    max_workers: Optional[int] = None,
    label: str = "item",
) -> list:
    """
    Execute a function in parallel for multiple items.

    Failures are isolated: an item whose call raises is logged and gets
    None in the result list, the remaining items still run.

    Args:
        fn: Function to call for each item (takes single item as arg)
        items: List of items to process
        max_workers: Max concurrent threads (default: MAX_WORKERS)
        label: Noun used in log messages

    Returns:
        List of results in same order as items
    """
    if not items:
        return []

    max_workers = max_workers or MAX_WORKERS
    max_workers = max(1, min(max_workers, len(items)))  # Don't create more workers than items

    results = [None] * len(items)

    if max_workers == 1:
        for i, item in enumerate(items):
            try:
                results[i] = fn(item)
            except Exception as e:
                logger.error(f"Parallel {label} error for item {i}: {e}")
        return results

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {
            executor.submit(fn, item): i
            for i, item in enumerate(items)
        }

        for future in as_completed(future_to_index):
            index = future_to_index[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logger.error(f"Parallel {label} error for item {index}: {e}")
                results[index] = None

    return results


def run_with_stats(
    fn: Callable[[Any], Any],
    items: list,
    max_workers: Optional[int] = None,
    label: str = "item",
) -> tuple[list, dict]:
    """
    parallel_map plus a summary of successes, failures and timing.

    Args:
        fn: Function to call for each item
        items: Items to process
        max_workers: Max concurrent threads
        label: Noun used in log messages

    Returns:
        (results, stats) where stats has total/successful/failed/elapsed_ms
        and the indices of failed items
    """
    start_time = time.time()
    results = parallel_map(fn, items, max_workers=max_workers, label=label)
    elapsed = time.time() - start_time

    failed = [i for i, r in enumerate(results) if r is None]
    stats = {
        "total": len(items),
        "successful": len(items) - len(failed),
        "failed": len(failed),
        "failed_indices": failed,
        "elapsed_ms": round(elapsed * 1000),
        "avg_ms_per_item": round(elapsed * 1000 / len(items)) if items else 0,
    }
    logger.info(f"Processed {stats['total']} {label}s: {stats['successful']} ok, {stats['failed']} failed")
    return results, stats

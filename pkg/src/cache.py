"""
Cache module for per-utterance feature matrices.
Provides thread-safe in-memory caching with TTL support.
"""

import time
import logging
import threading
from pathlib import Path
from typing import Optional, Any, Union

logger = logging.getLogger(__name__)

# =============================================================================
# CACHE STORAGE
# =============================================================================

# Cache storage: {key: (value, expiry_timestamp)}
_cache: dict[str, tuple[Any, float]] = {}
_lock = threading.Lock()


# =============================================================================
# KEYS
# =============================================================================

def feature_key(path: Union[str, Path], tag: str) -> str:
    """
    Build a cache key for features of one audio/feature file.

    The file's modification time is part of the key so rewritten files
    are never served from a stale entry.

    Args:
        path: Source file path
        tag: Analysis setting identifier (e.g. "mel:<dsp hash>")

    Returns:
        Cache key string
    """
    path = Path(path)
    try:
        mtime = path.stat().st_mtime_ns
    except OSError:
        mtime = 0
    return f"features:{tag}:{path.resolve()}:{mtime}"


# =============================================================================
# CACHE FUNCTIONS
# =============================================================================

def cache_get(key: str) -> Optional[Any]:
    """
    Get value from cache if not expired.

    Args:
        key: Cache key

    Returns:
        Cached value or None if not found/expired
    """
    with _lock:
        if key in _cache:
            value, expiry = _cache[key]
            if time.time() < expiry:
                logger.debug(f"Cache hit: {key[:80]}")
                return value
            del _cache[key]
    return None


def cache_set(key: str, value: Any, ttl: int) -> None:
    """
    Store value in cache with TTL, dropping entries that have expired.

    Args:
        key: Cache key
        value: Value to cache
        ttl: Time to live in seconds
    """
    now = time.time()
    with _lock:
        expired = [k for k, (_, exp) in _cache.items() if exp <= now]
        for k in expired:
            del _cache[k]
        _cache[key] = (value, now + ttl)
    if expired:
        logger.debug(f"Cache swept {len(expired)} expired entries")
    logger.debug(f"Cache set: {key[:80]} (TTL: {ttl}s)")


def cache_clear() -> dict:
    """
    Clear all entries and return stats.

    Returns:
        Dict with number of entries cleared
    """
    with _lock:
        stats = {"entries_cleared": len(_cache)}
        _cache.clear()
    logger.info(f"Cache cleared: {stats['entries_cleared']} entries")
    return stats


def cache_stats() -> dict:
    """
    Get cache statistics.

    Returns:
        Dict with total, valid, and expired entry counts
    """
    now = time.time()
    with _lock:
        valid = sum(1 for _, (_, exp) in _cache.items() if exp > now)
        total = len(_cache)
    return {
        "total_entries": total,
        "valid_entries": valid,
        "expired_entries": total - valid,
    }


def cache_delete(key: str) -> bool:
    """
    Delete a specific key from cache.

    Args:
        key: Cache key to delete

    Returns:
        True if key was deleted, False if not found
    """
    with _lock:
        if key in _cache:
            del _cache[key]
            return True
    return False

import logging
import threading
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

logger = logging.getLogger(__name__)


class SignalCache:
    """Context-signal values per (user, kind), valid until their TTL lapses."""

    def __init__(self):
        self.cache: Dict[Tuple[str, str], Tuple[str, int, int]] = {}
        self._lock = threading.Lock()

    def _generate_cache_key(self, user_id: str, kind: str) -> Tuple[str, str]:
        return (user_id or "", kind)

    def get(self, user_id: str, kind: str, now_ms: int) -> Optional[Tuple[str, int]]:
        """(value, observed_ms) if a fresh entry exists."""
        cache_key = self._generate_cache_key(user_id, kind)
        with self._lock:
            entry = self.cache.get(cache_key)
        if entry is None:
            return None
        value, observed_ms, ttl_ms = entry
        if 0 <= now_ms - observed_ms <= ttl_ms:
            return value, observed_ms
        return None

    def set(self, user_id: str, kind: str, value: str, observed_ms: int, ttl_ms: int):
        with self._lock:
            self.cache[self._generate_cache_key(user_id, kind)] = (value, observed_ms, ttl_ms)

    def invalidate(self, kind: Optional[str] = None):
        with self._lock:
            if kind is None:
                self.cache.clear()
            else:
                for key in [k for k in self.cache if k[1] == kind]:
                    del self.cache[key]


@dataclass(frozen=True)
class BioCacheEntry:
    user_id: str
    cached_bio: object
    refresh_pending: bool = False


class BioCache:
    """Last committed bio per user. Entries are replaced whole, never mutated.

    Every invalidation bumps a generation counter. A reader that loaded a
    bio from the store fills the cache only if no invalidation happened
    since it started and nobody published in the meantime.
    """

    def __init__(self):
        self._entries: Dict[str, BioCacheEntry] = {}
        self._generation = 0
        self._lock = threading.Lock()

    def get(self, user_id: str) -> Optional[BioCacheEntry]:
        with self._lock:
            return self._entries.get(user_id)

    def generation(self) -> int:
        with self._lock:
            return self._generation

    def publish(self, user_id: str, bio) -> None:
        with self._lock:
            current = self._entries.get(user_id)
            pending = current.refresh_pending if current else False
            self._entries[user_id] = BioCacheEntry(user_id, bio, pending)

    def fill(self, user_id: str, bio, generation: int) -> bool:
        """Cache a bio read from the store; False if it may already be stale."""
        with self._lock:
            if generation != self._generation or user_id in self._entries:
                return False
            self._entries[user_id] = BioCacheEntry(user_id, bio)
            return True

    def mark_pending(self, user_id: str, pending: bool) -> None:
        with self._lock:
            current = self._entries.get(user_id)
            if current is not None:
                self._entries[user_id] = replace(current, refresh_pending=pending)

    def invalidate(self, user_id: str) -> None:
        with self._lock:
            self._entries.pop(user_id, None)
            self._generation += 1
            logger.debug(f"Bio cache invalidated for {user_id}")

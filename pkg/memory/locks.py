import threading
from contextlib import contextmanager
from typing import Dict, Hashable, List


class LockTable:
    """A re-entrant lock per key, dropped once nobody holds or waits on it."""

    def __init__(self):
        self._entries: Dict[Hashable, List] = {}  # key -> [lock, holders and waiters]
        self._guard = threading.Lock()

    @contextmanager
    def hold(self, key: Hashable):
        with self._guard:
            entry = self._entries.setdefault(key, [threading.RLock(), 0])
            entry[1] += 1
        try:
            with entry[0]:
                yield
        finally:
            with self._guard:
                entry[1] -= 1
                if entry[1] == 0:
                    del self._entries[key]

    def __len__(self) -> int:
        with self._guard:
            return len(self._entries)

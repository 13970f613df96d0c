import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

from memory.clock import Clock, SystemClock
from memory.text import ErasedContent

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 64


@dataclass(frozen=True)
class ScratchpadItem:
    session_id: str
    key: str
    value: str
    written_ms: int
    priority: int = 0
    seq: int = 0


class WorkingMemory:
    """In-process scratchpad per session. Nothing here is ever persisted."""

    def __init__(self, clock: Optional[Clock] = None, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("Scratchpad capacity must be at least 1")
        self.clock = clock or SystemClock()
        self.capacity = capacity
        self._sessions: Dict[str, Dict[str, ScratchpadItem]] = {}
        self._seq = itertools.count()
        self._lock = threading.Lock()

    def set_item(self, session_id: str, key: str, value: str, priority: int = 0) -> ScratchpadItem:
        key = (key or "").strip()
        if not key:
            raise ValueError("Scratchpad key must be non-empty")
        with self._lock:
            items = self._sessions.setdefault(session_id, {})
            item = ScratchpadItem(session_id, key, str(value), self.clock.now_ms(), int(priority), next(self._seq))
            items[key] = item
            while len(items) > self.capacity:
                victim = min(items.values(), key=lambda i: (i.priority, i.written_ms, i.seq))
                del items[victim.key]
                logger.debug(f"Scratchpad for {session_id} full, evicted '{victim.key}'")
        return item

    def get_item(self, session_id: str, key: str) -> Optional[str]:
        with self._lock:
            item = self._sessions.get(session_id, {}).get(key)
        return item.value if item else None

    def items(self, session_id: str) -> List[ScratchpadItem]:
        """Highest priority first, then newest."""
        with self._lock:
            items = list(self._sessions.get(session_id, {}).values())
        return sorted(items, key=lambda i: (-i.priority, -i.written_ms, -i.seq))

    def clear_session(self, session_id: str) -> int:
        with self._lock:
            removed = len(self._sessions.pop(session_id, {}))
        if removed:
            logger.info(f"Cleared {removed} scratchpad items for session {session_id}")
        return removed

    def scrub(self, session_ids: Iterable[str], content: ErasedContent) -> int:
        """Drop scratchpad items whose key or value holds forgotten content."""
        removed = 0
        with self._lock:
            for session_id in session_ids:
                items = self._sessions.get(session_id, {})
                for key in [k for k, i in items.items() if content.matches(k) or content.matches(i.value)]:
                    del items[key]
                    removed += 1
        return removed

import itertools
import logging
import os
import threading
import time
import uuid
from abc import ABC, abstractmethod
from datetime import datetime, timezone
from typing import Optional

logger = logging.getLogger(__name__)

MINUTE_MS = 60 * 1000
HOUR_MS = 60 * MINUTE_MS
DAY_MS = 24 * HOUR_MS


class Clock(ABC):
    @abstractmethod
    def now_ms(self) -> int:
        """Current UTC time in milliseconds."""
        pass


class SystemClock(Clock):
    """Wall clock that never goes backwards."""

    def __init__(self):
        self._last = 0
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            self._last = max(self._last, int(time.time() * 1000))
            return self._last


class FakeClock(Clock):
    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def set(self, now_ms: int) -> None:
        with self._lock:
            self._now = int(now_ms)

    def advance(self, delta_ms: int) -> int:
        with self._lock:
            self._now += int(delta_ms)
            return self._now


def parse_timestamp(value) -> int:
    """Accepts integer milliseconds or an ISO-8601 string (naive values are UTC)."""
    if isinstance(value, (int, float)):
        return int(value)
    text = str(value).strip()
    if text.lstrip("-").isdigit():
        return int(text)
    parsed = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return int(parsed.timestamp() * 1000)


def to_datetime(ts_ms: int) -> datetime:
    return datetime.fromtimestamp(ts_ms / 1000, tz=timezone.utc)


def clock_from_env(fake_now: Optional[str] = None) -> Clock:
    fake_now = fake_now if fake_now is not None else os.getenv('MMAG_FAKE_NOW')
    if fake_now:
        start = parse_timestamp(fake_now)
        logger.info(f"Using fake clock starting at {start}")
        return FakeClock(start)
    return SystemClock()


class IdFactory:
    def __call__(self) -> str:
        return uuid.uuid4().hex


class SequentialIds(IdFactory):
    """Deterministic ids for replay and evaluation runs."""

    def __init__(self, prefix: str = "id"):
        self.prefix = prefix
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def __call__(self) -> str:
        with self._lock:
            return f"{self.prefix}-{next(self._counter):06d}"

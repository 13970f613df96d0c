import logging
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from memory.cache import SignalCache
from memory.clock import MINUTE_MS, Clock, SystemClock, to_datetime

logger = logging.getLogger(__name__)

LOCATION = "location"
WEATHER = "weather"
TIME_OF_DAY = "time_of_day"
SCHEDULE = "schedule"

DEFAULT_TTLS_MS = {
    WEATHER: 30 * MINUTE_MS,
    LOCATION: 10 * MINUTE_MS,
    TIME_OF_DAY: MINUTE_MS,
}
FALLBACK_TTL_MS = 10 * MINUTE_MS
DEFAULT_TIMEOUT_MS = 200


@dataclass(frozen=True)
class ContextSignal:
    kind: str
    value: str
    observed_ms: int
    ttl_ms: int

    def is_fresh(self, now_ms: int) -> bool:
        return 0 <= now_ms - self.observed_ms <= self.ttl_ms


def time_of_day(ts_ms: int) -> str:
    hour = to_datetime(ts_ms).hour
    if 5 <= hour <= 11:
        return "morning"
    if 12 <= hour <= 17:
        return "afternoon"
    if 18 <= hour <= 22:
        return "evening"
    return "night"


def render_context(signals: Iterable[ContextSignal]) -> str:
    ordered = sorted(signals, key=lambda s: s.kind)
    if not ordered:
        return ""
    return "Context: " + "; ".join(f"{s.kind}={s.value}" for s in ordered)


class ContextProvider(ABC):
    ttl_ms: Optional[int] = None

    @abstractmethod
    def fetch(self, user_id: str, now_ms: int) -> Optional[str]:
        """Current value of the signal, or None when unavailable."""
        pass


class StaticProvider(ContextProvider):
    def __init__(self, value: str, ttl_ms: Optional[int] = None):
        self.value = value
        self.ttl_ms = ttl_ms

    def fetch(self, user_id, now_ms):
        return self.value


class CallableProvider(ContextProvider):
    def __init__(self, fn: Callable[[str, int], Optional[str]], ttl_ms: Optional[int] = None):
        self.fn = fn
        self.ttl_ms = ttl_ms

    def fetch(self, user_id, now_ms):
        return self.fn(user_id, now_ms)


class WorkHoursProvider(ContextProvider):
    """"work_hours" on workdays between start and end hour (UTC), else "leisure"."""

    def __init__(self, start_hour: int = 9, end_hour: int = 17, workdays=(0, 1, 2, 3, 4)):
        self.start_hour = start_hour
        self.end_hour = end_hour
        self.workdays = set(workdays)
        self.ttl_ms = MINUTE_MS

    def fetch(self, user_id, now_ms):
        moment = to_datetime(now_ms)
        if moment.weekday() in self.workdays and self.start_hour <= moment.hour < self.end_hour:
            return "work_hours"
        return "leisure"


@dataclass(frozen=True)
class ProviderRegistration:
    kind: str
    provider: ContextProvider
    ttl_ms: int
    timeout_ms: int


class ContextMemory:
    """Provider registry producing fresh, TTL-bounded signal snapshots.

    Providers run in parallel; a provider that fails or misses its timeout is
    left out of the snapshot. A provider whose last call has outlived its
    timeout is not called again until that call returns, so hung providers
    cannot take over the worker pool.
    """

    def __init__(self, clock: Optional[Clock] = None, default_timeout_ms: int = DEFAULT_TIMEOUT_MS,
                 max_workers: int = 8):
        self.clock = clock or SystemClock()
        self.default_timeout_ms = default_timeout_ms
        self.cache = SignalCache()
        self.provider_calls = 0
        self._providers: Dict[str, ProviderRegistration] = {}
        self._inflight: Dict[str, Tuple[Future, float]] = {}
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="context")

    def register_provider(self, kind: str, provider: ContextProvider, ttl_ms: Optional[int] = None,
                          timeout_ms: Optional[int] = None) -> ProviderRegistration:
        kind = (kind or "").strip().lower()
        if not kind:
            raise ValueError("Signal kind must be non-empty")
        if kind == TIME_OF_DAY:
            raise ValueError("time_of_day is built in and cannot be replaced")
        ttl = ttl_ms or provider.ttl_ms or DEFAULT_TTLS_MS.get(kind, FALLBACK_TTL_MS)
        registration = ProviderRegistration(kind, provider, ttl, timeout_ms or self.default_timeout_ms)
        with self._lock:
            if kind in self._providers:
                logger.warning(f"Replacing context provider for '{kind}'")
            self._providers[kind] = registration
            self._inflight.pop(kind, None)
            self.cache.invalidate(kind)
        return registration

    def unregister_provider(self, kind: str) -> bool:
        with self._lock:
            self._inflight.pop(kind, None)
            self.cache.invalidate(kind)
            return self._providers.pop(kind, None) is not None

    def kinds(self) -> List[str]:
        with self._lock:
            return sorted(self._providers) + [TIME_OF_DAY]

    def _submit(self, registration: ProviderRegistration, user_id: str, now_ms: int) -> Optional[Future]:
        with self._lock:
            running, since = self._inflight.get(registration.kind, (None, 0.0))
            overdue = time.monotonic() - since > registration.timeout_ms / 1000.0
            if running is not None and not running.done() and overdue:
                future = None
            else:
                future = self._executor.submit(self._call, registration, user_id, now_ms)
                self._inflight[registration.kind] = (future, time.monotonic())
        if future is None:
            logger.warning(f"Context provider '{registration.kind}' has not returned from an earlier call, skipped")
            return None
        future.add_done_callback(lambda f: self._settle(registration.kind, f))
        return future

    def _settle(self, kind: str, future: Future) -> None:
        with self._lock:
            if self._inflight.get(kind, (None, 0.0))[0] is future:
                del self._inflight[kind]

    def _call(self, registration: ProviderRegistration, user_id: str, now_ms: int) -> Optional[str]:
        with self._lock:
            self.provider_calls += 1
        return registration.provider.fetch(user_id, now_ms)

    def snapshot(self, user_id: str, now_ms: Optional[int] = None) -> List[ContextSignal]:
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        with self._lock:
            registrations = list(self._providers.values())

        signals = [ContextSignal(TIME_OF_DAY, time_of_day(now_ms), now_ms, DEFAULT_TTLS_MS[TIME_OF_DAY])]
        pending = []
        started = time.monotonic()
        for registration in registrations:
            cached = self.cache.get(user_id, registration.kind, now_ms)
            if cached is not None:
                value, observed_ms = cached
                signals.append(ContextSignal(registration.kind, value, observed_ms, registration.ttl_ms))
            else:
                future = self._submit(registration, user_id, now_ms)
                if future is not None:
                    pending.append((registration, future))

        for registration, future in pending:
            remaining = started + registration.timeout_ms / 1000.0 - time.monotonic()
            try:
                value = future.result(timeout=max(0.0, remaining))
            except FutureTimeout:
                logger.warning(f"Context provider '{registration.kind}' timed out after {registration.timeout_ms}ms")
                continue
            except Exception as e:
                logger.error(f"Context provider '{registration.kind}' failed: {str(e)}")
                continue
            if value is None or not str(value).strip():
                continue
            value = str(value).strip()
            self.cache.set(user_id, registration.kind, value, now_ms, registration.ttl_ms)
            signals.append(ContextSignal(registration.kind, value, now_ms, registration.ttl_ms))

        return sorted((s for s in signals if s.is_fresh(now_ms)), key=lambda s: s.kind)

    def close(self):
        self._executor.shutdown(wait=False)

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

from memory.clock import DAY_MS, Clock, IdFactory, SystemClock, to_datetime
from memory.errors import EventInPastError, InvalidMessage
from memory.locks import LockTable
from memory.storage import RecordKey, RecordStore
from memory.text import ErasedContent, top_term

logger = logging.getLogger(__name__)

DEFAULT_GRACE_MS = DAY_MS
SLOT_HOURS = 3
DAY_NAMES = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]


class EventStatus(str, Enum):
    PENDING = "pending"
    FIRED = "fired"
    EXPIRED = "expired"


@dataclass(frozen=True)
class EventRecord:
    event_id: str
    user_id: str
    fire_at_ms: int
    payload: str
    status: str = EventStatus.PENDING.value

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class InteractionStamp:
    user_id: str
    ts_ms: int
    topic: str


@dataclass(frozen=True)
class RoutineCue:
    user_id: str
    day_of_week: int
    slot: int
    topic: str
    support: int
    window_days: int
    last_seen_ms: int = 0

    def reminder_text(self) -> str:
        return f"You often discuss {self.topic} around this time."

    def describe(self) -> str:
        start = self.slot * SLOT_HOURS
        return (f"{DAY_NAMES[self.day_of_week]} {start:02d}:00-{start + SLOT_HOURS:02d}:00 "
                f"{self.topic} (support {self.support})")

    def to_dict(self) -> Dict:
        return asdict(self)


def routine_bucket(ts_ms: int) -> Tuple[int, int]:
    """(day of week with Monday=0, 3-hour slot) of a UTC timestamp."""
    moment = to_datetime(ts_ms)
    return moment.weekday(), moment.hour // SLOT_HOURS


def calendar_week(ts_ms: int) -> Tuple[int, int]:
    iso = to_datetime(ts_ms).isocalendar()
    return iso[0], iso[1]


def normalize_topic(topic: Optional[str], text: Optional[str] = None) -> str:
    normalized = (topic or "").strip().lower()
    if not normalized and text:
        normalized = top_term(text) or ""
    if not normalized:
        raise InvalidMessage("empty")
    return normalized


class EpisodicMemory:
    """Future events with fire-once polling, and interaction stamps for routine detection."""

    EVENT_NAMESPACE = "event"
    STAMP_NAMESPACE = "stamp"

    def __init__(self, store: RecordStore, clock: Optional[Clock] = None,
                 ids: Optional[IdFactory] = None, grace_ms: int = DEFAULT_GRACE_MS):
        self.store = store
        self.clock = clock or SystemClock()
        self.ids = ids or IdFactory()
        self.grace_ms = grace_ms
        self._events: Dict[str, Dict[str, EventRecord]] = {}
        self._stamps: Dict[str, List[InteractionStamp]] = {}
        self._user_locks = LockTable()

    def _lock_for(self, user_id: str):
        return self._user_locks.hold(user_id)

    def _event_index(self, user_id: str) -> Dict[str, EventRecord]:
        with self._lock_for(user_id):
            index = self._events.get(user_id)
            if index is None:
                index = {}
                for key in self.store.list_keys(self.EVENT_NAMESPACE, user_id):
                    data = json.loads(self.store.get_record(key).decode("utf-8"))
                    index[key.record_id] = EventRecord(**data)
                self._events[user_id] = index
            return index

    def _save_event(self, event: EventRecord) -> None:
        key = RecordKey(self.EVENT_NAMESPACE, event.user_id, event.event_id)
        self.store.put_record(key, json.dumps(event.to_dict(), sort_keys=True).encode("utf-8"))
        self._events[event.user_id][event.event_id] = event

    # events

    def add_event(self, user_id: str, fire_at_ms: int, payload: str) -> EventRecord:
        payload = (payload or "").strip()
        if not payload:
            raise InvalidMessage("empty")
        now = self.clock.now_ms()
        if fire_at_ms <= now:
            raise EventInPastError(f"Event time {fire_at_ms} is not after now ({now})")
        event = EventRecord(self.ids(), user_id, int(fire_at_ms), payload)
        with self._lock_for(user_id):
            self._event_index(user_id)
            self._save_event(event)
        logger.info(f"Scheduled event {event.event_id} for {user_id} at {fire_at_ms}")
        return event

    def list_events(self, user_id: str, status: Optional[str] = None) -> List[EventRecord]:
        with self._lock_for(user_id):
            events = list(self._event_index(user_id).values())
        if status is not None:
            events = [e for e in events if e.status == EventStatus(status).value]
        return sorted(events, key=lambda e: (e.fire_at_ms, e.event_id))

    def due_events(self, user_id: str, now_ms: Optional[int] = None, lookahead_ms: int = 0) -> List[EventRecord]:
        """Pending events due by now + lookahead, each returned exactly once.

        Pending events older than the grace window are marked expired instead.
        """
        if lookahead_ms < 0:
            raise ValueError("lookahead_ms must be non-negative")
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        due = []
        with self._lock_for(user_id):
            for event in list(self._event_index(user_id).values()):
                if event.status != EventStatus.PENDING.value:
                    continue
                if event.fire_at_ms < now_ms - self.grace_ms:
                    self._save_event(replace(event, status=EventStatus.EXPIRED.value))
                    logger.info(f"Event {event.event_id} for {user_id} expired unfired")
                elif event.fire_at_ms <= now_ms + lookahead_ms:
                    fired = replace(event, status=EventStatus.FIRED.value)
                    self._save_event(fired)
                    due.append(fired)
        return sorted(due, key=lambda e: (e.fire_at_ms, e.event_id))

    def cancel_event(self, user_id: str, event_id: str) -> bool:
        with self._lock_for(user_id):
            self._event_index(user_id).pop(event_id, None)
            return self.store.erase_record(RecordKey(self.EVENT_NAMESPACE, user_id, event_id))

    # interaction stamps

    def _stamp_list(self, user_id: str) -> List[InteractionStamp]:
        with self._lock_for(user_id):
            stamps = self._stamps.get(user_id)
            if stamps is None:
                stamps = []
                for key in self.store.list_keys(self.STAMP_NAMESPACE, user_id):
                    data = json.loads(self.store.get_record(key).decode("utf-8"))
                    stamps.append(InteractionStamp(user_id, data["ts_ms"], data["topic"]))
                stamps.sort(key=lambda s: (s.ts_ms, s.topic))
                self._stamps[user_id] = stamps
            return stamps

    def log_interaction(self, user_id: str, ts_ms: Optional[int] = None, topic: Optional[str] = None,
                        text: Optional[str] = None) -> InteractionStamp:
        """Append a stamp; without a topic, the turn text's top content word is used."""
        ts_ms = self.clock.now_ms() if ts_ms is None else int(ts_ms)
        stamp = InteractionStamp(user_id, ts_ms, normalize_topic(topic, text))
        key = RecordKey(self.STAMP_NAMESPACE, user_id, f"{ts_ms:013d}-{self.ids()}")
        with self._lock_for(user_id):
            stamps = self._stamp_list(user_id)
            self.store.put_record(key, json.dumps({"ts_ms": ts_ms, "topic": stamp.topic}).encode("utf-8"))
            stamps.append(stamp)
            stamps.sort(key=lambda s: (s.ts_ms, s.topic))
        return stamp

    def stamps(self, user_id: str) -> List[InteractionStamp]:
        with self._lock_for(user_id):
            return list(self._stamp_list(user_id))

    def detect_routines(self, user_id: str, now_ms: Optional[int] = None, window_days: int = 28,
                        min_support: int = 3) -> List[RoutineCue]:
        if window_days < 7:
            raise ValueError("window_days must be at least 7")
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        start = now_ms - window_days * DAY_MS
        buckets: Dict[Tuple[int, int, str], List[int]] = defaultdict(list)
        for stamp in self.stamps(user_id):
            if start <= stamp.ts_ms <= now_ms:
                day, slot = routine_bucket(stamp.ts_ms)
                buckets[(day, slot, stamp.topic)].append(stamp.ts_ms)

        cues = []
        for (day, slot, topic), times in buckets.items():
            weeks = {calendar_week(ts) for ts in times}
            if len(times) >= min_support and len(weeks) >= min_support:
                cues.append(RoutineCue(user_id, day, slot, topic, len(times), window_days, max(times)))
        return sorted(cues, key=lambda c: (-c.support, c.topic, c.day_of_week, c.slot))

    def forget_matching(self, user_id: str, content: ErasedContent) -> int:
        """Erase events whose payload and stamps whose topic hold forgotten content."""
        if not content:
            return 0
        erased = 0
        with self._lock_for(user_id):
            index = self._event_index(user_id)
            for event in list(index.values()):
                if content.matches(event.payload):
                    erased += int(self.store.erase_record(RecordKey(self.EVENT_NAMESPACE, user_id, event.event_id)))
                    del index[event.event_id]
            for key in self.store.list_keys(self.STAMP_NAMESPACE, user_id):
                data = json.loads(self.store.get_record(key).decode("utf-8"))
                if content.matches(data["topic"]):
                    erased += int(self.store.erase_record(key))
            self._stamps.pop(user_id, None)
        if erased:
            logger.info(f"Erased {erased} event and stamp records holding forgotten content for {user_id}")
        return erased

    def forget_user(self, user_id: str) -> int:
        erased = 0
        with self._lock_for(user_id):
            for namespace in (self.EVENT_NAMESPACE, self.STAMP_NAMESPACE):
                for key in self.store.list_keys(namespace, user_id):
                    erased += int(self.store.erase_record(key))
            self._events.pop(user_id, None)
            self._stamps.pop(user_id, None)
        logger.info(f"Erased {erased} event and stamp records for {user_id}")
        return erased

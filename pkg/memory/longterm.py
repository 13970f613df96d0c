import json
import logging
import re
import threading
from abc import ABC, abstractmethod
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Union

from memory.base import Message, Role, count_tokens
from memory.cache import BioCache
from memory.clock import Clock, SystemClock
from memory.errors import InvalidMessage, OversizeError, RecordNotFound
from memory.locks import LockTable
from memory.storage import RecordKey, RecordStore
from memory.text import ErasedContent, split_sentences

logger = logging.getLogger(__name__)

MAX_BIO_TOKENS = 2000
BIO_VERSIONS_KEPT = 5


class BioSource(str, Enum):
    USER_STATED = "user_stated"
    INFERRED = "inferred"


class Consent(str, Enum):
    GRANTED = "granted"
    REVOKED = "revoked"


@dataclass(frozen=True)
class UserBio:
    user_id: str
    text: str
    version: int
    updated_ms: int
    source: str = BioSource.USER_STATED.value

    def sentences(self) -> List[str]:
        return split_sentences(self.text)


@dataclass(frozen=True)
class TraitEntry:
    user_id: str
    key: str
    value: str
    consent: str
    updated_ms: int

    @property
    def granted(self) -> bool:
        return self.consent == Consent.GRANTED.value


@dataclass(frozen=True)
class ForgetSelector:
    kind: str  # all | bio | trait | fact
    value: Optional[str] = None

    @classmethod
    def everything(cls):
        return cls("all")

    @classmethod
    def bio(cls):
        return cls("bio")

    @classmethod
    def trait(cls, key: str):
        return cls("trait", key)

    @classmethod
    def fact(cls, text: str):
        return cls("fact", text)

    @classmethod
    def parse(cls, spec: str) -> "ForgetSelector":
        """'all', 'bio', 'trait:<key>' or 'fact:<text>'."""
        kind, _, value = spec.partition(":")
        if kind in ("all", "bio") and not value:
            return cls(kind)
        if kind in ("trait", "fact") and value.strip():
            return cls(kind, value.strip())
        raise ValueError(f"Invalid forget selector: {spec}")


@dataclass
class ErasureReport:
    user_id: str
    selector: ForgetSelector
    erased: List[str] = field(default_factory=list)
    rewritten: List[str] = field(default_factory=list)
    # what was forgotten, for scrubbing copies held by other layers; never serialized
    content: ErasedContent = field(default_factory=ErasedContent, repr=False, compare=False)

    @property
    def noop(self) -> bool:
        return not self.erased and not self.rewritten

    def to_dict(self) -> Dict:
        return {
            "user_id": self.user_id,
            "selector": asdict(self.selector),
            "erased": list(self.erased),
            "rewritten": list(self.rewritten),
        }


class BioRefresher(ABC):
    @abstractmethod
    def refresh(self, current_text: str, transcript: List[str]) -> str:
        """Return the updated bio text."""
        pass


_MY_X_IS = re.compile(r"\bmy\s+([a-z][a-z ]{0,40}?)\s+is\s+(.+)", re.IGNORECASE)
_I_LIKE = re.compile(r"\bI\s+(?:really\s+)?(like|love|enjoy)\s+(.+)", re.IGNORECASE)
_CLAUSE_END = re.compile(r",|;|\s+and\s+|\s+but\s+", re.IGNORECASE)


def _clause(text: str) -> str:
    return _CLAUSE_END.split(text, maxsplit=1)[0].strip().rstrip(".!?").strip()


def extract_self_statements(text: str) -> List[tuple]:
    """(attribute or None, normalized sentence) for each self-statement in text."""
    found = []
    for sentence in split_sentences(text):
        match = _MY_X_IS.search(sentence)
        if match:
            attribute = " ".join(match.group(1).lower().split())
            value = _clause(match.group(2))
            if value:
                found.append((attribute, f"My {attribute} is {value}."))
            continue
        match = _I_LIKE.search(sentence)
        if match:
            obj = _clause(match.group(2))
            if obj:
                found.append((None, f"I {match.group(1).lower()} {obj}."))
    return found


class RuleBasedRefresher(BioRefresher):
    """Appends stated "my <attribute> is <value>" and "I like <thing>" sentences.

    A newer statement about an attribute replaces the older one; exact
    duplicates are ignored.
    """

    def __init__(self, max_tokens: int = MAX_BIO_TOKENS):
        self.max_tokens = max_tokens

    def refresh(self, current_text, transcript):
        sentences = split_sentences(current_text)
        for text in transcript:
            for attribute, statement in extract_self_statements(text):
                lowered = {s.lower() for s in sentences}
                if statement.lower() in lowered:
                    continue
                if attribute:
                    prefix = f"my {attribute} is "
                    sentences = [s for s in sentences if not s.lower().startswith(prefix)]
                sentences.append(statement)
        while sentences and count_tokens(" ".join(sentences)) > self.max_tokens:
            sentences.pop(0)
        return " ".join(sentences)


class BackendRefresher(BioRefresher):
    """Asks a generation backend to rewrite the bio."""

    def __init__(self, backend, seed: int = 0, max_tokens: int = MAX_BIO_TOKENS):
        self.backend = backend
        self.seed = seed
        self.max_tokens = max_tokens

    def refresh(self, current_text, transcript):
        from memory.backend import ChatMessage
        from memory.base import truncate_to_tokens

        messages = [
            ChatMessage("system", "Rewrite the user biography below, adding durable facts the user "
                                  "stated about themselves. Reply with the biography only. "
                                  f"Current biography: {current_text or '(empty)'}"),
            ChatMessage("user", "\n".join(transcript)),
        ]
        return truncate_to_tokens(self.backend.generate(messages, self.seed).strip(), self.max_tokens)


@dataclass(eq=False)
class QueuedRefresh:
    """Transcript texts waiting for a refresh worker; forget scrubs them in place."""
    user_id: str
    texts: List[str]


class RefreshJob:
    def __init__(self, user_id: str, future: Future):
        self.user_id = user_id
        self._future = future

    def done(self) -> bool:
        return self._future.done()

    def result(self, timeout: Optional[float] = None) -> Optional[UserBio]:
        """The newly committed bio, or None when nothing changed or the refresh failed."""
        return self._future.result(timeout)


class LongTermUserMemory:
    """Encrypted bios and traits with consent, inspection and crypto-shredding."""

    BIO_NAMESPACE = "bio"
    TRAIT_NAMESPACE = "trait"
    META_NAMESPACE = "meta"

    def __init__(self, store: RecordStore, clock: Optional[Clock] = None,
                 refresher: Optional[BioRefresher] = None, max_bio_tokens: int = MAX_BIO_TOKENS,
                 refresh_workers: int = 2):
        self.store = store
        self.clock = clock or SystemClock()
        self.refresher = refresher or RuleBasedRefresher(max_bio_tokens)
        self.max_bio_tokens = max_bio_tokens
        self.cache = BioCache()
        self.refresh_calls = 0
        self.hot_path_refresh_calls = 0
        self._counter_lock = threading.Lock()
        self._hot = threading.local()
        self._user_locks = LockTable()
        self._queued: Dict[str, List[QueuedRefresh]] = {}
        self._guard = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=refresh_workers, thread_name_prefix="bio-refresh")

    def _lock_for(self, user_id: str):
        return self._user_locks.hold(user_id)

    @staticmethod
    def _bio_key(user_id):
        return RecordKey(LongTermUserMemory.BIO_NAMESPACE, user_id, "profile")

    @staticmethod
    def _meta_key(user_id):
        return RecordKey(LongTermUserMemory.META_NAMESPACE, user_id, "bio_version")

    @staticmethod
    def _trait_key(user_id, key):
        return RecordKey(LongTermUserMemory.TRAIT_NAMESPACE, user_id, key)

    def _read_json(self, key: RecordKey):
        try:
            return json.loads(self.store.get_record(key).decode("utf-8"))
        except RecordNotFound:
            return None

    def _write_json(self, key: RecordKey, data) -> None:
        self.store.put_record(key, json.dumps(data, sort_keys=True).encode("utf-8"))

    # bios

    def bio_versions(self, user_id: str) -> List[UserBio]:
        data = self._read_json(self._bio_key(user_id))
        if not data:
            return []
        return [UserBio(user_id=user_id, **v) for v in data["versions"]]

    def get_bio(self, user_id: str) -> Optional[UserBio]:
        versions = self.bio_versions(user_id)
        return versions[-1] if versions else None

    def _commit_bio(self, user_id: str, text: str, source: str, history: List[UserBio]) -> UserBio:
        meta = self._read_json(self._meta_key(user_id)) or {"high_water": 0}
        version = max(meta["high_water"], history[-1].version if history else 0) + 1
        bio = UserBio(user_id, text, version, self.clock.now_ms(), source)
        kept = (history + [bio])[-BIO_VERSIONS_KEPT:]
        self._write_json(self._bio_key(user_id), {
            "versions": [{"text": b.text, "version": b.version, "updated_ms": b.updated_ms, "source": b.source}
                         for b in kept],
        })
        self._write_json(self._meta_key(user_id), {"high_water": version})
        self.cache.publish(user_id, bio)
        logger.info(f"Committed bio version {version} for {user_id}")
        return bio

    def upsert_bio(self, user_id: str, text: str, source: Union[BioSource, str] = BioSource.USER_STATED) -> UserBio:
        text = (text or "").strip()
        if not text:
            raise InvalidMessage("empty")
        if count_tokens(text) > self.max_bio_tokens:
            raise OversizeError(f"Bio exceeds {self.max_bio_tokens} tokens")
        source = BioSource(source).value
        with self._lock_for(user_id):
            return self._commit_bio(user_id, text, source, self.bio_versions(user_id))

    def edit_bio(self, user_id: str, text: str) -> UserBio:
        return self.upsert_bio(user_id, text, BioSource.USER_STATED)

    # traits

    def set_trait(self, user_id: str, key: str, value: Optional[str] = None,
                  consent: Union[Consent, str] = Consent.GRANTED) -> TraitEntry:
        key = (key or "").strip()
        if not key:
            raise ValueError("Trait key must be non-empty")
        consent = Consent(consent).value
        with self._lock_for(user_id):
            if value is None:
                existing = self._read_json(self._trait_key(user_id, key))
                if existing is None:
                    raise ValueError(f"Trait '{key}' has no value to update")
                value = existing["value"]
            entry = TraitEntry(user_id, key, value, consent, self.clock.now_ms())
            self._write_json(self._trait_key(user_id, key), {
                "key": key, "value": entry.value, "consent": consent, "updated_ms": entry.updated_ms,
            })
        return entry

    def revoke_trait(self, user_id: str, key: str) -> TraitEntry:
        return self.set_trait(user_id, key, None, Consent.REVOKED)

    def _all_traits(self, user_id: str) -> List[TraitEntry]:
        traits = []
        for key in self.store.list_keys(self.TRAIT_NAMESPACE, user_id):
            data = self._read_json(key)
            if data is not None:
                traits.append(TraitEntry(user_id, data["key"], data["value"], data["consent"], data["updated_ms"]))
        return sorted(traits, key=lambda t: t.key)

    def get_traits(self, user_id: str) -> List[TraitEntry]:
        """Consented traits only, sorted by key."""
        return [t for t in self._all_traits(user_id) if t.granted]

    # user control

    def inspect(self, user_id: str) -> Dict:
        versions = self.bio_versions(user_id)
        traits = self._all_traits(user_id)
        self.store.audit.append("inspect", self.BIO_NAMESPACE, user_id)
        return {
            "user_id": user_id,
            "bio_versions": [asdict(b) for b in versions],
            "traits": [asdict(t) for t in traits],
            "audit": self.store.audit.entries(user_id),
        }

    def forget(self, user_id: str, selector: ForgetSelector) -> ErasureReport:
        """Erase what the selector names.

        The report's content holds every sentence and value that was
        forgotten, so callers can scrub copies kept by other layers. Refreshes
        still queued for the user are scrubbed here.
        """
        report = ErasureReport(user_id, selector)
        with self._lock_for(user_id):
            if selector.kind in ("all", "bio"):
                for version in self.bio_versions(user_id):
                    report.content.add(*version.sentences())
                if self.store.erase_record(self._bio_key(user_id)):
                    report.erased.append(str(self._bio_key(user_id)))
            if selector.kind == "all":
                for trait in self._all_traits(user_id):
                    report.content.add(trait.value)
                for key in self.store.list_keys(self.TRAIT_NAMESPACE, user_id):
                    if self.store.erase_record(key):
                        report.erased.append(str(key))
            elif selector.kind == "trait":
                key = self._trait_key(user_id, selector.value)
                existing = self._read_json(key)
                if existing is not None:
                    report.content.add(existing["value"])
                if self.store.erase_record(key):
                    report.erased.append(str(key))
            elif selector.kind == "fact":
                self._forget_fact(user_id, selector.value, report)
            elif selector.kind != "bio":
                raise ValueError(f"Unknown forget selector {selector.kind}")
            self.cache.invalidate(user_id)
            with self._guard:
                for queued in self._queued.get(user_id, []):
                    queued.texts = report.content.scrub(queued.texts)
        logger.info(f"Forget {selector.kind} for {user_id}: {len(report.erased)} erased, "
                    f"{len(report.rewritten)} rewritten")
        return report

    def _forget_fact(self, user_id: str, fact: str, report: ErasureReport) -> None:
        needle = fact.lower()
        report.content.add(fact)
        versions = self.bio_versions(user_id)
        for version in versions:
            report.content.add(*(s for s in version.sentences() if needle in s.lower()))
        if any(needle in v.text.lower() for v in versions):
            current = versions[-1]
            remaining = [s for s in current.sentences() if needle not in s.lower()]
            bio_key = str(self._bio_key(user_id))
            if remaining:
                # older versions are dropped, so the fact survives in none of them
                self._commit_bio(user_id, " ".join(remaining), current.source, [])
                report.rewritten.append(bio_key)
            elif self.store.erase_record(self._bio_key(user_id)):
                report.erased.append(bio_key)
        for trait in self._all_traits(user_id):
            if needle in trait.value.lower() or needle == trait.key.lower():
                report.content.add(trait.value)
                key = self._trait_key(user_id, trait.key)
                if self.store.erase_record(key):
                    report.erased.append(str(key))

    # asynchronous refresh

    @contextmanager
    def hot_path(self):
        """Marks the current thread as assembling a prompt."""
        previous = getattr(self._hot, "active", False)
        self._hot.active = True
        try:
            yield
        finally:
            self._hot.active = previous

    def _invoke_refresher(self, current_text: str, transcript: List[str]) -> str:
        with self._counter_lock:
            self.refresh_calls += 1
            if getattr(self._hot, "active", False):
                self.hot_path_refresh_calls += 1
        return self.refresher.refresh(current_text, transcript)

    def get_cached_bio(self, user_id: str) -> Optional[UserBio]:
        """Last committed bio; never runs or waits for a refresh."""
        while True:
            entry = self.cache.get(user_id)
            if entry is not None:
                return entry.cached_bio
            generation = self.cache.generation()
            bio = self.get_bio(user_id)
            if self.cache.fill(user_id, bio, generation):
                return bio
            # invalidated or republished while reading; the bio may be stale
            logger.debug(f"Bio for {user_id} changed during a cache fill, reading again")

    def schedule_bio_refresh(self, user_id: str, recent_transcript: Iterable[Union[str, Message]]) -> RefreshJob:
        texts = []
        for item in recent_transcript:
            if isinstance(item, Message):
                if item.role == Role.USER.value:
                    texts.append(item.content)
            elif item:
                texts.append(str(item))
        self.get_cached_bio(user_id)
        self.cache.mark_pending(user_id, True)
        queued = QueuedRefresh(user_id, texts)
        with self._guard:
            self._queued.setdefault(user_id, []).append(queued)
        future = self._executor.submit(self._run_refresh, queued)
        return RefreshJob(user_id, future)

    def _run_refresh(self, queued: QueuedRefresh) -> Optional[UserBio]:
        user_id = queued.user_id
        try:
            with self._lock_for(user_id):
                texts = list(queued.texts)
                current = self.get_bio(user_id)
                current_text = current.text if current else ""
                new_text = self._invoke_refresher(current_text, texts).strip()
                if not new_text or new_text == current_text:
                    logger.debug(f"Bio refresh for {user_id} found nothing new")
                    return None
                if count_tokens(new_text) > self.max_bio_tokens:
                    raise OversizeError(f"Refreshed bio exceeds {self.max_bio_tokens} tokens")
                return self._commit_bio(user_id, new_text, BioSource.INFERRED.value,
                                        self.bio_versions(user_id))
        except Exception as e:
            logger.error(f"Bio refresh for {user_id} failed, keeping cached version: {str(e)}", exc_info=True)
            return None
        finally:
            with self._guard:
                waiting = self._queued.get(user_id, [])
                if queued in waiting:
                    waiting.remove(queued)
                if not waiting:
                    self._queued.pop(user_id, None)
            self.cache.mark_pending(user_id, False)

    def close(self):
        self._executor.shutdown(wait=True)

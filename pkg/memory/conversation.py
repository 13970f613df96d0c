import json
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from memory.base import (
    DEFAULT_BUDGET_TOKENS,
    MAX_MESSAGE_TOKENS,
    Message,
    Role,
    count_tokens,
    dump_jsonl,
    load_jsonl,
    truncate_to_tokens,
    validate_message,
)
from memory.clock import Clock, IdFactory, SystemClock
from memory.errors import BudgetError, PartialBatchError, StorageError
from memory.locks import LockTable
from memory.storage import RecordKey, RecordStore
from memory.text import ErasedContent, first_sentence

logger = logging.getLogger(__name__)

SUMMARY_PREFIX = "Earlier: "


@dataclass(frozen=True)
class RememberResult:
    status: str  # "stored" | "skipped"
    reason: Optional[str] = None
    message: Optional[Message] = None

    @property
    def stored(self) -> bool:
        return self.status == "stored"


@dataclass
class ConversationLog:
    session_id: str
    messages: List[Message] = field(default_factory=list)
    total_tokens: int = 0
    user_id: Optional[str] = None
    # store record ids, parallel to messages
    record_ids: List[str] = field(default_factory=list, repr=False)
    next_seq: int = field(default=0, repr=False)


@dataclass(frozen=True)
class PruneReport:
    dropped_count: int = 0
    dropped_tokens: int = 0
    summary: Optional[Message] = None


def summarize_dropped(dropped: List[Message], cap: int) -> str:
    """Extractive summary: each dropped turn's first sentence, joined and capped."""
    if not dropped:
        raise ValueError("Nothing to summarize")
    text = SUMMARY_PREFIX + "; ".join(first_sentence(m.content) for m in dropped)
    return truncate_to_tokens(text, cap)


class Summarizer(ABC):
    @abstractmethod
    def summarize(self, dropped: List[Message], cap: int) -> str:
        pass


class ExtractiveSummarizer(Summarizer):
    def summarize(self, dropped, cap):
        return summarize_dropped(dropped, cap)


class BackendSummarizer(Summarizer):
    """Abstractive summaries from a generation backend; falls back to extractive."""

    def __init__(self, backend, seed: int = 0):
        self.backend = backend
        self.seed = seed

    def summarize(self, dropped, cap):
        from memory.backend import ChatMessage

        transcript = "\n".join(f"{m.role}: {m.content}" for m in dropped)
        messages = [
            ChatMessage("system", "Summarize the earlier part of this conversation in one or two sentences."),
            ChatMessage("user", transcript),
        ]
        try:
            text = self.backend.generate(messages, self.seed).strip()
        except Exception as e:
            logger.error(f"Backend summarizer failed, using extractive summary: {str(e)}")
            return summarize_dropped(dropped, cap)
        return truncate_to_tokens(SUMMARY_PREFIX + text, cap)


class ConversationMemory:
    """Append-only dialogue log per session, persisted under namespace "conv".

    Sessions bound to a user are indexed under namespace "session" so that
    forgetting can find every turn the user ever had. Redaction is the only
    way a stored turn goes away.
    """

    NAMESPACE = "conv"
    SESSION_NAMESPACE = "session"

    def __init__(self, store: RecordStore, clock: Optional[Clock] = None,
                 ids: Optional[IdFactory] = None, summarizer: Optional[Summarizer] = None,
                 max_message_tokens: int = MAX_MESSAGE_TOKENS, summarize: bool = True):
        self.store = store
        self.clock = clock or SystemClock()
        self.ids = ids or IdFactory()
        self.summarizer = summarizer if summarizer is not None else ExtractiveSummarizer()
        self.summarize_enabled = summarize
        self.max_message_tokens = max_message_tokens
        self._logs: Dict[str, ConversationLog] = {}
        self._session_locks = LockTable()
        self._guard = threading.Lock()

    def _lock_for(self, session_id: str):
        return self._session_locks.hold(session_id)

    def _log(self, session_id: str) -> ConversationLog:
        with self._lock_for(session_id):
            log = self._logs.get(session_id)
            if log is None:
                log = ConversationLog(session_id)
                for key in sorted(self.store.list_keys(self.NAMESPACE, session_id), key=lambda k: k.record_id):
                    message = Message.from_json(self.store.get_record(key).decode("utf-8"))
                    log.messages.append(message)
                    log.record_ids.append(key.record_id)
                    log.total_tokens += message.token_count
                    log.next_seq = int(key.record_id) + 1
                if log.messages:
                    logger.debug(f"Loaded {len(log.messages)} turns for session {session_id}")
                with self._guard:
                    self._logs[session_id] = log
            return log

    def bind_session(self, session_id: str, user_id: str) -> None:
        """Record that session_id belongs to user_id; a session has one owner."""
        with self._lock_for(session_id):
            log = self._log(session_id)
            if log.user_id == user_id:
                return
            key = RecordKey(self.SESSION_NAMESPACE, user_id, session_id)
            self.store.put_record(key, json.dumps({"session_id": session_id}).encode("utf-8"))
            log.user_id = user_id

    def user_sessions(self, user_id: str) -> List[str]:
        indexed = {k.record_id for k in self.store.list_keys(self.SESSION_NAMESPACE, user_id)}
        with self._guard:
            live = {s for s, log in self._logs.items() if log.user_id == user_id}
        return sorted(indexed | live)

    def redact(self, user_id: str, content: ErasedContent) -> int:
        """Crypto-shred every turn of the user's sessions that holds forgotten content."""
        if not content:
            return 0
        erased = 0
        for session_id in self.user_sessions(user_id):
            with self._lock_for(session_id):
                log = self._log(session_id)
                kept = []
                for record_id, message in zip(log.record_ids, log.messages):
                    if content.matches(message.content):
                        erased += int(self.store.erase_record(RecordKey(self.NAMESPACE, session_id, record_id)))
                    else:
                        kept.append((record_id, message))
                if len(kept) == len(log.messages):
                    continue
                log.record_ids = [rid for rid, _ in kept]
                log.messages = [m for _, m in kept]
                log.total_tokens = sum(m.token_count for m in log.messages)
        if erased:
            logger.info(f"Redacted {erased} turns holding forgotten content for {user_id}")
        return erased

    def forget_user(self, user_id: str) -> int:
        """Crypto-shred every turn and the session index of every session the user owned."""
        erased = 0
        for session_id in self.user_sessions(user_id):
            with self._lock_for(session_id):
                for key in self.store.list_keys(self.NAMESPACE, session_id):
                    erased += int(self.store.erase_record(key))
                self.store.erase_record(RecordKey(self.SESSION_NAMESPACE, user_id, session_id))
                with self._guard:
                    self._logs.pop(session_id, None)
        logger.info(f"Erased {erased} conversation turns for {user_id}")
        return erased

    def remember(self, session_id: str, message: Message) -> RememberResult:
        verdict = validate_message(message.role, message.content, self.max_message_tokens)
        if not verdict.valid:
            logger.warning(f"Skipping {verdict.reason} message in session {session_id}")
            return RememberResult("skipped", verdict.reason)
        with self._lock_for(session_id):
            log = self._log(session_id)
            last_ts = log.messages[-1].timestamp if log.messages else message.timestamp
            stored = replace(
                message,
                session_id=session_id,
                timestamp=max(message.timestamp, last_ts),
                token_count=count_tokens(message.content),
            )
            # sequence numbers only grow, so redaction never reorders a log
            key = RecordKey(self.NAMESPACE, session_id, f"{log.next_seq:010d}")
            self.store.put_record(key, stored.to_json().encode("utf-8"))
            log.messages.append(stored)
            log.record_ids.append(key.record_id)
            log.next_seq += 1
            log.total_tokens += stored.token_count
        return RememberResult("stored", message=stored)

    def remember_turn(self, session_id: str, role, content: str, ts_ms: Optional[int] = None,
                      user_id: Optional[str] = None) -> RememberResult:
        ts_ms = ts_ms if ts_ms is not None else self.clock.now_ms()
        if user_id is not None:
            self.bind_session(session_id, user_id)
        return self.remember(session_id, Message.create(session_id, role, content, ts_ms, ids=self.ids))

    def remember_batch(self, session_id: str, messages: List[Message]) -> List[RememberResult]:
        results: List[RememberResult] = []
        for message in messages:
            try:
                results.append(self.remember(session_id, message))
            except StorageError as e:
                logger.error(f"Batch for session {session_id} stopped at message {len(results)}: {str(e)}")
                raise PartialBatchError(results, e)
        return results

    def log(self, session_id: str) -> ConversationLog:
        log = self._log(session_id)
        with self._lock_for(session_id):
            return ConversationLog(session_id, list(log.messages), log.total_tokens, log.user_id)

    def recent_turns(self, session_id: str, n: int) -> List[Message]:
        log = self._log(session_id)
        with self._lock_for(session_id):
            return list(log.messages[-n:]) if n > 0 else []

    def history(self, session_id: str, budget: int = DEFAULT_BUDGET_TOKENS) -> Tuple[List[Message], PruneReport]:
        """Most recent turns whose tokens fit the budget, oldest first.

        Dropped turns are summarized into one leading system message when
        budget remains after the kept suffix.
        """
        if budget <= 0:
            raise BudgetError(f"History budget must be positive, got {budget}")
        log = self._log(session_id)
        with self._lock_for(session_id):
            messages = log.messages
            kept_tokens = 0
            start = len(messages)
            while start > 0 and kept_tokens + messages[start - 1].token_count <= budget:
                start -= 1
                kept_tokens += messages[start].token_count
            kept = list(messages[start:])
            dropped = messages[:start]

        if not dropped:
            return kept, PruneReport()
        dropped_tokens = sum(m.token_count for m in dropped)
        summary = None
        cap = budget - kept_tokens
        if self.summarize_enabled and self.summarizer is not None and cap > 0:
            text = self.summarizer.summarize(list(dropped), cap)
            if len(text) > len(SUMMARY_PREFIX) and count_tokens(text) <= cap:
                summary = Message(
                    id=f"summary-{session_id}-{len(dropped)}",
                    session_id=session_id,
                    role=Role.SYSTEM.value,
                    content=text,
                    timestamp=dropped[0].timestamp,
                    token_count=count_tokens(text),
                )
        logger.debug(f"Pruned {len(dropped)} turns ({dropped_tokens} tokens) from session {session_id}")
        report = PruneReport(len(dropped), dropped_tokens, summary)
        return ([summary] if summary else []) + kept, report

    def sessions(self) -> List[str]:
        known = {k.user_id for k in self.store.list_keys(self.NAMESPACE)}
        return sorted(known | set(self._logs))

    def export_jsonl(self, session_id: str) -> str:
        return dump_jsonl(self.log(session_id).messages)

    def import_jsonl(self, text: str) -> List[RememberResult]:
        results = []
        for message in load_jsonl(text):
            results.append(self.remember(message.session_id, message))
        return results

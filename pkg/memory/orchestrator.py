import json
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from memory.backend import GenerationBackend, to_chat_messages
from memory.base import MAX_MESSAGE_TOKENS, MemorySource, Role, TokenBudget, count_tokens, validate_message
from memory.clock import MINUTE_MS, Clock, SystemClock, to_datetime
from memory.context import ContextMemory, ContextSignal, render_context
from memory.conversation import ConversationMemory, PruneReport
from memory.episodic import EpisodicMemory, EventStatus, calendar_week, routine_bucket
from memory.errors import BackendError, BudgetError, InvalidMessage
from memory.locks import LockTable
from memory.longterm import LongTermUserMemory
from memory.policy import (
    PRESETS,
    CompositeResponseScorer,
    Policy,
    PolicyName,
    ResponseScorer,
    RetrievedItem,
    rank_items,
)
from memory.text import ErasedContent
from memory.working import WorkingMemory

logger = logging.getLogger(__name__)

BIO_PREFIX = "About the user: "
WORKING_PREFIX = "Working memory: "
QUERY_SOURCE = "query"
DEFAULT_LOOKAHEAD_MS = 15 * MINUTE_MS
RECENT_TURN_WINDOW = 10
RECENT_TURNS_FOR_COHERENCE = 5


@dataclass(frozen=True)
class PromptSegment:
    role: str
    content: str
    source: str
    token_count: int
    kind: str

    @classmethod
    def make(cls, role, content: str, source, kind: str) -> "PromptSegment":
        role = role.value if isinstance(role, Role) else role
        source = source.value if isinstance(source, MemorySource) else source
        return cls(role, content, source, count_tokens(content), kind)

    def to_dict(self) -> Dict:
        return {"role": self.role, "content": self.content, "source": self.source,
                "token_count": self.token_count, "kind": self.kind}


@dataclass(frozen=True)
class TraceRecord:
    section: str
    source: str
    ref: str
    score: float
    relevance: float
    tokens: int
    selected: bool

    def to_dict(self) -> Dict:
        return {"section": self.section, "source": self.source, "ref": self.ref, "score": round(self.score, 6),
                "relevance": round(self.relevance, 6), "tokens": self.tokens, "selected": self.selected}


@dataclass
class PromptAssembly:
    user_id: str
    session_id: str
    now_ms: int
    policy_used: str
    budget_total: int
    segments: List[PromptSegment] = field(default_factory=list)
    trace: List[TraceRecord] = field(default_factory=list)
    allocations: Dict[str, int] = field(default_factory=dict)
    prune: Optional[PruneReport] = None

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.segments)

    def text(self) -> str:
        return "\n".join(s.content for s in self.segments)

    def reminder_refs(self) -> List[str]:
        return [t.ref for t in self.trace if t.section == "reminder" and t.selected]

    def to_dict(self) -> Dict:
        return {
            "user_id": self.user_id,
            "session_id": self.session_id,
            "now_ms": self.now_ms,
            "policy": self.policy_used,
            "budget": self.budget_total,
            "total_tokens": self.total_tokens,
            "allocations": dict(sorted(self.allocations.items())),
            "segments": [s.to_dict() for s in self.segments],
            "trace": [t.to_dict() for t in self.trace],
            "dropped_turns": self.prune.dropped_count if self.prune else 0,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    def explain(self) -> str:
        lines = [f"policy={self.policy_used} budget={self.budget_total} total_tokens={self.total_tokens}"]
        for name, tokens in sorted(self.allocations.items()):
            lines.append(f"  allocation {name}: {tokens}")
        for record in self.trace:
            mark = "+" if record.selected else "-"
            lines.append(f"  {mark} [{record.section}] {record.ref} score={record.score:.4f} "
                         f"relevance={record.relevance:.4f} tokens={record.tokens}")
        for segment in self.segments:
            lines.append(f"  segment {segment.kind}/{segment.role} ({segment.token_count} tokens)")
        return "\n".join(lines)


@dataclass(frozen=True)
class Reminder:
    reminder_id: str
    user_id: str
    text: str
    source: MemorySource
    ts_ms: int

    def as_item(self) -> RetrievedItem:
        return RetrievedItem(self.source, self.text, self.ts_ms, ref=self.reminder_id)


class PendingReminders:
    """Per-user reminder queue; each reminder is handed to exactly one assembly."""

    def __init__(self):
        self._queues: Dict[str, List[Reminder]] = {}
        self._lock = threading.Lock()

    def push(self, reminders: Iterable[Reminder]) -> None:
        with self._lock:
            for reminder in reminders:
                self._queues.setdefault(reminder.user_id, []).append(reminder)

    def drain(self, user_id: str) -> List[Reminder]:
        with self._lock:
            return self._queues.pop(user_id, [])

    def requeue(self, user_id: str, reminders: Sequence[Reminder]) -> None:
        if not reminders:
            return
        with self._lock:
            self._queues[user_id] = list(reminders) + self._queues.get(user_id, [])

    def peek(self, user_id: str) -> List[Reminder]:
        with self._lock:
            return list(self._queues.get(user_id, []))

    def scrub(self, user_id: str, content: ErasedContent) -> int:
        with self._lock:
            queued = self._queues.pop(user_id, [])
            kept = [r for r in queued if not content.matches(r.text)]
            if kept:
                self._queues[user_id] = kept
        return len(queued) - len(kept)


@dataclass
class ConflictResolution:
    response: str
    policy: str
    assembly: PromptAssembly
    candidates: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"response": self.response, "policy": self.policy, "candidates": self.candidates}


def _floor_share(tokens: int, fraction: float) -> int:
    return max(0, int(math.floor(tokens * fraction + 1e-9)))


def _greedy(ranked: List[RetrievedItem], cap: int, render: Callable[[List[RetrievedItem]], str]):
    selected: List[RetrievedItem] = []
    for item in ranked:
        if count_tokens(render(selected + [item])) <= cap:
            selected.append(item)
    return selected


class MemoryController:
    """Scores items from every layer and assembles budgeted prompts."""

    def __init__(self, conversation: ConversationMemory, longterm: LongTermUserMemory,
                 episodic: EpisodicMemory, context: ContextMemory, working: WorkingMemory,
                 clock: Optional[Clock] = None, policy: Optional[Policy] = None,
                 budget: Optional[TokenBudget] = None, pending: Optional[PendingReminders] = None,
                 scorer: Optional[ResponseScorer] = None, lookahead_ms: int = DEFAULT_LOOKAHEAD_MS,
                 routine_window_days: int = 28, routine_min_support: int = 3,
                 max_message_tokens: int = MAX_MESSAGE_TOKENS):
        self.conversation = conversation
        self.longterm = longterm
        self.episodic = episodic
        self.context = context
        self.working = working
        self.clock = clock or SystemClock()
        self.policy = policy or PRESETS[PolicyName.RECENCY_FIRST]
        self.budget = budget or TokenBudget()
        self.pending = pending or PendingReminders()
        self.scorer = scorer or CompositeResponseScorer()
        self.lookahead_ms = lookahead_ms
        self.routine_window_days = routine_window_days
        self.routine_min_support = routine_min_support
        self.max_message_tokens = max_message_tokens
        # user_id -> (calendar week, routine reminder ids emitted in it)
        self._emitted_routines: Dict[str, Tuple[Tuple[int, int], Set[str]]] = {}
        self._routine_lock = threading.Lock()
        self._session_locks = LockTable()

    def _session_lock(self, session_id: str):
        return self._session_locks.hold(session_id)

    # candidate gathering

    def _bio_items(self, user_id: str) -> List[RetrievedItem]:
        items = []
        bio = self.longterm.get_cached_bio(user_id)
        if bio is not None:
            for i, sentence in enumerate(bio.sentences()):
                items.append(RetrievedItem(MemorySource.LONG_TERM_USER, sentence, bio.updated_ms, ref=f"bio:{i:04d}"))
        for trait in self.longterm.get_traits(user_id):
            items.append(RetrievedItem(MemorySource.LONG_TERM_USER, f"{trait.key}: {trait.value}.",
                                       trait.updated_ms, ref=f"trait:{trait.key}"))
        return items

    @staticmethod
    def _context_items(signals: List[ContextSignal]) -> List[RetrievedItem]:
        return [RetrievedItem(MemorySource.CONTEXT, f"{s.kind}={s.value}", s.observed_ms, ref=s.kind) for s in signals]

    def _working_items(self, session_id: str) -> List[RetrievedItem]:
        return [RetrievedItem(MemorySource.WORKING, f"{i.key}={i.value}", i.written_ms, ref=f"{i.seq:08d}:{i.key}")
                for i in self.working.items(session_id)]

    @staticmethod
    def event_reminder_text(payload: str, fire_at_ms: int) -> str:
        return f"Upcoming: {payload} at {to_datetime(fire_at_ms).strftime('%H:%M')} UTC"

    def react_retrieve(self, user_id: str, session_id: str, query_text: str, now_ms: Optional[int] = None,
                       policy: Optional[Policy] = None, k: int = 5) -> List[RetrievedItem]:
        """Top-k items across every layer for the query. Reads only; nothing fires or drains."""
        if k < 1:
            raise ValueError("k must be at least 1")
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        policy = policy or self.policy
        with self.longterm.hot_path():
            candidates = self._bio_items(user_id)
        for event in self.episodic.list_events(user_id, EventStatus.PENDING.value):
            if now_ms - self.episodic.grace_ms <= event.fire_at_ms <= now_ms + self.lookahead_ms:
                candidates.append(RetrievedItem(MemorySource.EPISODIC_EVENT,
                                                self.event_reminder_text(event.payload, event.fire_at_ms),
                                                event.fire_at_ms, ref=f"event:{event.event_id}"))
        for cue in self.episodic.detect_routines(user_id, now_ms, self.routine_window_days, self.routine_min_support):
            candidates.append(RetrievedItem(MemorySource.ROUTINE, cue.reminder_text(), cue.last_seen_ms,
                                            ref=f"routine:{cue.day_of_week}:{cue.slot}:{cue.topic}"))
        candidates.extend(self._context_items(self.context.snapshot(user_id, now_ms)))
        candidates.extend(self._working_items(session_id))
        older = self.conversation.log(session_id).messages[:-RECENT_TURN_WINDOW]
        candidates.extend(RetrievedItem(MemorySource.CONVERSATIONAL, m.content, m.timestamp, ref=f"turn:{m.id}")
                          for m in older)
        return rank_items(candidates, query_text, now_ms, policy)[:k]

    # proactive path

    def proactive_tick(self, user_id: str, now_ms: Optional[int] = None,
                       lookahead_ms: Optional[int] = None) -> List[Reminder]:
        """Queue reminders for due events and for routines matching the current slot."""
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        lookahead_ms = self.lookahead_ms if lookahead_ms is None else lookahead_ms
        reminders = [
            Reminder(f"event:{e.event_id}", user_id, self.event_reminder_text(e.payload, e.fire_at_ms),
                     MemorySource.EPISODIC_EVENT, e.fire_at_ms)
            for e in self.episodic.due_events(user_id, now_ms, lookahead_ms)
        ]
        day, slot = routine_bucket(now_ms)
        year, week = calendar_week(now_ms)
        for cue in self.episodic.detect_routines(user_id, now_ms, self.routine_window_days, self.routine_min_support):
            if (cue.day_of_week, cue.slot) != (day, slot):
                continue
            reminder_id = f"routine:{year}-W{week:02d}:{day}:{slot}:{cue.topic}"
            with self._routine_lock:
                emitted_week, emitted = self._emitted_routines.get(user_id, (None, set()))
                if emitted_week is not None and (year, week) < emitted_week:
                    continue
                if emitted_week != (year, week):
                    # ids carry their week, so only the current week's ids are kept
                    emitted = set()
                    self._emitted_routines[user_id] = ((year, week), emitted)
                if reminder_id in emitted:
                    continue
                emitted.add(reminder_id)
            reminders.append(Reminder(reminder_id, user_id, cue.reminder_text(), MemorySource.ROUTINE, cue.last_seen_ms))
        if reminders:
            self.pending.push(reminders)
            logger.info(f"Queued {len(reminders)} reminders for {user_id}")
        return reminders

    # assembly

    def assemble_prompt(self, user_id: str, session_id: str, query_text: str, now_ms: Optional[int] = None,
                        policy: Optional[Policy] = None, budget: Optional[TokenBudget] = None) -> PromptAssembly:
        with self._session_lock(session_id):
            reminders = self.pending.drain(user_id)
            try:
                assembly, leftover = self._assemble(user_id, session_id, query_text, now_ms, policy, budget, reminders)
            except Exception:
                self.pending.requeue(user_id, reminders)
                raise
            self.pending.requeue(user_id, leftover)
            return assembly

    def _assemble(self, user_id, session_id, query_text, now_ms, policy, budget,
                  reminders: List[Reminder]) -> Tuple[PromptAssembly, List[Reminder]]:
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        policy = policy or self.policy
        budget = budget or self.budget
        verdict = validate_message(Role.USER, query_text, self.max_message_tokens)
        if not verdict.valid:
            raise InvalidMessage(verdict.reason)
        query_tokens = count_tokens(query_text)
        if query_tokens > budget.total:
            raise BudgetError(f"Query needs {query_tokens} tokens but the budget is {budget.total}")

        remaining = budget.total - query_tokens
        allocations = {
            "bio": _floor_share(remaining, budget.fraction(MemorySource.LONG_TERM_USER)),
            "context": _floor_share(remaining, budget.fraction(MemorySource.CONTEXT)),
            "reminders": _floor_share(remaining, budget.fraction(MemorySource.EPISODIC_EVENT)),
            "working": _floor_share(remaining, budget.fraction(MemorySource.WORKING)),
        }
        assembly = PromptAssembly(user_id, session_id, now_ms, policy.name.value, budget.total)

        def record(section, ranked, selected):
            chosen = {id(i) for i in selected}
            for item in ranked:
                assembly.trace.append(TraceRecord(section, item.source.value, item.ref, item.score,
                                                  item.relevance, item.token_count, id(item) in chosen))

        with self.longterm.hot_path():
            bio_ranked = rank_items(self._bio_items(user_id), query_text, now_ms, policy)

        def render_bio(items):
            return BIO_PREFIX + " ".join(i.content for i in sorted(items, key=lambda i: i.ref))

        bio = _greedy(bio_ranked, allocations["bio"], render_bio)
        record("bio", bio_ranked, bio)
        if bio:
            assembly.segments.append(PromptSegment.make(Role.SYSTEM, render_bio(bio), MemorySource.LONG_TERM_USER, "bio"))

        signals = {s.kind: s for s in self.context.snapshot(user_id, now_ms) if s.is_fresh(now_ms)}
        context_ranked = rank_items(self._context_items(list(signals.values())), query_text, now_ms, policy)

        def render_signals(items):
            return render_context([signals[i.ref] for i in items])

        context = _greedy(context_ranked, allocations["context"], render_signals)
        record("context", context_ranked, context)
        if context:
            assembly.segments.append(PromptSegment.make(Role.SYSTEM, render_signals(context), MemorySource.CONTEXT,
                                                        "context"))

        by_id = {r.reminder_id: r for r in reminders}
        reminder_ranked = rank_items([r.as_item() for r in reminders], query_text, now_ms, policy)
        chosen, spent = [], 0
        for item in reminder_ranked:
            if spent + item.token_count <= allocations["reminders"]:
                chosen.append(item)
                spent += item.token_count
        record("reminder", reminder_ranked, chosen)
        chosen_ids = {i.ref for i in chosen}
        for item in sorted(chosen, key=lambda i: (i.ts_ms, i.ref)):
            assembly.segments.append(PromptSegment.make(Role.SYSTEM, item.content, item.source, "reminder"))
        leftover = [by_id[r.reminder_id] for r in reminders if r.reminder_id not in chosen_ids]

        working_items = self._working_items(session_id)
        order = {item.ref: n for n, item in enumerate(working_items)}
        working_ranked = rank_items(working_items, query_text, now_ms, policy)

        def render_working(items):
            return WORKING_PREFIX + "; ".join(i.content for i in sorted(items, key=lambda i: order[i.ref]))

        working = _greedy(working_ranked, allocations["working"], render_working)
        record("working", working_ranked, working)
        if working:
            assembly.segments.append(PromptSegment.make(Role.SYSTEM, render_working(working), MemorySource.WORKING,
                                                        "working"))

        used = sum(s.token_count for s in assembly.segments)
        conversation_budget = remaining - used
        allocations["conversation"] = conversation_budget
        if conversation_budget > 0:
            turns, assembly.prune = self.conversation.history(session_id, conversation_budget)
            for message in turns:
                kind = "summary" if message.role == Role.SYSTEM.value else "turn"
                assembly.segments.append(PromptSegment.make(message.role, message.content,
                                                            MemorySource.CONVERSATIONAL, kind))
        assembly.segments.append(PromptSegment.make(Role.USER, query_text, QUERY_SOURCE, "query"))
        assembly.allocations = allocations
        logger.debug(f"Assembled {len(assembly.segments)} segments ({assembly.total_tokens}/{budget.total} tokens) "
                     f"for {user_id}/{session_id} under {policy.name.value}")
        return assembly, leftover

    # conflict resolution

    def resolve_conflict(self, user_id: str, session_id: str, query_text: str, now_ms: Optional[int],
                         policies: Sequence[Policy], backend: GenerationBackend, seed: int = 0,
                         budget: Optional[TokenBudget] = None) -> ConflictResolution:
        """Generate one candidate per policy and keep the response that scores best."""
        ordered = sorted({p.name: p for p in policies}.values(), key=lambda p: p.name.rank)
        if len(ordered) < 2:
            raise ValueError("resolve_conflict needs at least two distinct policies")
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        with self._session_lock(session_id):
            reminders = self.pending.drain(user_id)
            trait_values = [t.value for t in self.longterm.get_traits(user_id)]
            recent = [m.content for m in self.conversation.recent_turns(session_id, RECENT_TURNS_FOR_COHERENCE)]
            best = None
            candidates = []
            for policy in ordered:
                try:
                    assembly, _ = self._assemble(user_id, session_id, query_text, now_ms, policy, budget, reminders)
                except Exception:
                    self.pending.requeue(user_id, reminders)
                    raise
                try:
                    response = backend.generate(to_chat_messages(assembly), seed)
                except Exception as e:
                    logger.error(f"Candidate under {policy.name.value} failed: {str(e)}")
                    candidates.append({"policy": policy.name.value, "status": "failed", "error": str(e)})
                    continue
                scores = self.scorer.score(response, trait_values, recent)
                candidates.append({"policy": policy.name.value, "status": "ok",
                                   **{k: round(v, 6) for k, v in scores.items()}})
                if best is None or scores["total"] > best[0]:
                    best = (scores["total"], policy, assembly, response)

            if best is None:
                self.pending.requeue(user_id, reminders)
                raise BackendError("Every candidate generation failed")
            _, policy, assembly, response = best
            delivered = set(assembly.reminder_refs())
            self.pending.requeue(user_id, [r for r in reminders if r.reminder_id not in delivered])

        logger.info(f"Conflict resolution for {user_id} selected {policy.name.value}")
        return ConflictResolution(response, policy.name.value, assembly, candidates)


class ProactiveTicker(threading.Thread):
    """Background thread running proactive_tick for a set of users."""

    def __init__(self, controller: MemoryController, users: Callable[[], Iterable[str]], interval_s: float = 30.0):
        super().__init__(name="proactive-ticker", daemon=True)
        self.controller = controller
        self.users = users
        self.interval_s = interval_s
        self._stop_event = threading.Event()

    def run(self):
        while not self._stop_event.is_set():
            for user_id in list(self.users()):
                try:
                    self.controller.proactive_tick(user_id)
                except Exception as e:
                    logger.error(f"Proactive tick for {user_id} failed: {str(e)}", exc_info=True)
            self._stop_event.wait(self.interval_s)

    def stop(self, timeout: Optional[float] = None):
        self._stop_event.set()
        self.join(timeout)

"""Synthetic multi-session corpora and the suite that measures retrieval
accuracy, leakage and assembly latency over them."""
import json
import logging
import math
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from memory.backend import GenerationBackend, MockBackend
from memory.base import TokenBudget
from memory.clock import DAY_MS, MINUTE_MS, FakeClock, SequentialIds
from memory.crypto import Keyring
from memory.longterm import ForgetSelector
from memory.policy import PRESETS, Policy, PolicyName
from memory.storage import RecordStore
from memory.system import MemorySystem

logger = logging.getLogger(__name__)

EPOCH_MS = 1704564000000  # 2024-01-06T18:00:00Z
EVENT_OFFSET_MS = 10 * MINUTE_MS
TRACE_FILE = "traces.jsonl"
RECALL_GAP = 400
SESSION_FACT_LEAD = 10

ADJECTIVES = ["favorite", "childhood", "secret", "lucky", "dream", "preferred", "oldest", "weekend",
              "morning", "winter"]
NOUNS = ["color", "city", "dish", "book", "song", "sport", "animal", "garden", "hobby", "drink"]
SYLLABLES = ["ka", "lo", "mi", "ra", "ten", "vo", "shu", "bel", "dri", "zan", "qui", "por", "nex", "wim"]
FILLER = [
    "Tell me something interesting about rivers.",
    "Can you explain how tides work?",
    "What should I read about ancient maps?",
    "Give me a quick tip for stretching after running.",
    "How do volcanoes form over time?",
    "Suggest a short poem about autumn leaves.",
    "Why do cats purr so much?",
    "Summarize the rules of chess briefly.",
    "How long should bread dough rest?",
    "What makes a good study schedule?",
]
EVENT_KINDS = ["dentist appointment", "team meeting", "flight departure", "piano lesson", "birthday dinner"]


@dataclass(frozen=True)
class PlantedFact:
    index: int
    attribute: str
    value: str
    text: str
    planted_session: int
    probe_session: int
    probe_query: str

    @property
    def in_session(self) -> bool:
        """Recalled from the same session's history rather than from the bio."""
        return self.planted_session == self.probe_session


@dataclass(frozen=True)
class Erasure:
    fact_index: int
    value: str
    session: int
    step: int = 0  # forgotten just before this step of the session

    def active_at(self, session: int, step: int) -> bool:
        return self.session < session or (self.session == session and step >= self.step)


@dataclass(frozen=True)
class EventSpec:
    index: int
    payload: str
    scheduled_session: int
    fire_session: int


@dataclass(frozen=True)
class SessionScript:
    index: int
    session_id: str
    start_ms: int
    turns: List[str]


@dataclass
class SyntheticCorpus:
    seed: int
    user_id: str
    sessions: List[SessionScript]
    planted_facts: List[PlantedFact]
    erasures: List[Erasure]
    scheduled_events: List[EventSpec]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def erased_indexes(self) -> Dict[int, Erasure]:
        return {e.fact_index: e for e in self.erasures}


FIXED_TEXT = " ".join(FILLER + ADJECTIVES + NOUNS + EVENT_KINDS + [
    "reply to known about the user working memory context time_of_day morning afternoon evening night",
    "upcoming earlier you often discuss around this time utc",
]).lower()


def _pseudo_word(rng: random.Random, taken: set) -> str:
    """Capitalized nonsense word that is not part of any other generated or fixed text."""
    while True:
        word = "".join(rng.choice(SYLLABLES) for _ in range(3)).capitalize()
        lowered = word.lower()
        if len(word) < 6 or lowered in FIXED_TEXT:
            continue
        if not any(lowered in t or t in lowered for t in taken):
            taken.add(word.lower())
            return word


def generate_corpus(seed: int, n_sessions: int = 10, n_facts: int = 20, n_erasures: int = 0,
                    n_events: int = 0, n_session_facts: Optional[int] = None,
                    recall_gap: int = RECALL_GAP) -> SyntheticCorpus:
    """Seeded corpus for one user.

    The last n_session_facts facts (by default a tenth of n_facts, never more
    than the facts left unerased) are planted and asked back in the same session, with
    recall_gap filler turns in between, so recalling them depends on the
    conversation budget rather than on the bio.
    """
    if n_sessions < 1 or n_facts < 0 or n_events < 0 or recall_gap < 0:
        raise ValueError("Corpus sizes must be non-negative with at least one session")
    if not 0 <= n_erasures <= n_facts:
        raise ValueError("n_erasures must be between 0 and n_facts")
    if n_session_facts is None:
        n_session_facts = min(n_facts // 10, n_facts - n_erasures)
    if not 0 <= n_session_facts <= n_facts - n_erasures:
        raise ValueError("n_session_facts must be between 0 and the number of facts that are not erased")
    n_cross = n_facts - n_session_facts
    if n_cross and n_sessions < 2:
        raise ValueError("Planted facts need at least two sessions")
    attributes = [f"{a} {n}" for a in ADJECTIVES for n in NOUNS]
    if n_facts > len(attributes):
        raise ValueError(f"At most {len(attributes)} facts are supported")

    rng = random.Random(seed)
    rng.shuffle(attributes)
    taken = set()
    facts = []
    for i in range(n_facts):
        if i < n_cross:
            planted = rng.randrange(0, n_sessions - 1)
            probe = rng.randrange(planted + 1, n_sessions)
        else:
            planted = probe = rng.randrange(n_sessions)
        value = _pseudo_word(rng, taken)
        attribute = attributes[i]
        facts.append(PlantedFact(i, attribute, value, f"My {attribute} is {value}.", planted, probe,
                                 f"What is my {attribute}?"))

    erased = [(index, rng.randint(facts[index].planted_session + 1, facts[index].probe_session))
              for index in sorted(rng.sample(range(n_cross), n_erasures))]

    events = []
    for i in range(n_events):
        scheduled = rng.randrange(n_sessions)
        fire = rng.randrange(scheduled, n_sessions)
        events.append(EventSpec(i, f"{rng.choice(EVENT_KINDS)} with {_pseudo_word(rng, taken)}", scheduled, fire))

    sessions = []
    for s in range(n_sessions):
        turns = [rng.choice(FILLER) for _ in range(rng.randint(2, 4))]
        for fact in facts:
            if fact.planted_session == s and not fact.in_session:
                turns.insert(rng.randint(0, len(turns)), fact.text)
        recalled = [fact.text for fact in facts if fact.in_session and fact.planted_session == s]
        if recalled:
            lead = [rng.choice(FILLER) for _ in range(SESSION_FACT_LEAD)]
            gap = [rng.choice(FILLER) for _ in range(recall_gap)]
            turns = lead + recalled + turns + gap
        sessions.append(SessionScript(s, f"u{seed}-s{s:03d}", EPOCH_MS + s * DAY_MS, turns))

    # erased between two scripted turns, while the session is open
    erasures = [Erasure(index, facts[index].value, s, rng.randint(1, len(sessions[s].turns) - 1))
                for index, s in erased]
    return SyntheticCorpus(seed, f"user-{seed}", sessions, facts, erasures, events)


@dataclass
class MetricsReport:
    seed: int
    retrieval_accuracy: Optional[float]
    response_accuracy: Optional[float]
    leakage_rate: float
    assembly_latency_p50_ms: float
    assembly_latency_p95_ms: float
    hot_path_refresh_calls: int
    probes: int = 0
    hits: int = 0
    assemblies: int = 0
    post_erasure_assemblies: int = 0
    leaked_assemblies: int = 0
    reminders_expected: int = 0
    reminders_delivered: int = 0
    reminder_duplicates: int = 0
    misses: List[Dict] = field(default_factory=list)
    config: Dict = field(default_factory=dict)

    LATENCY_FIELDS = ("assembly_latency_p50_ms", "assembly_latency_p95_ms")

    def to_dict(self, include_latency: bool = True) -> Dict:
        data = asdict(self)
        if not include_latency:
            for name in self.LATENCY_FIELDS:
                data.pop(name)
        return data

    def to_json(self, include_latency: bool = True) -> str:
        return json.dumps(self.to_dict(include_latency), sort_keys=True, indent=2)

    def table(self, include_latency: bool = True) -> str:
        def fmt(value):
            if value is None:
                return "n/a"
            return f"{value:.4f}" if isinstance(value, float) else str(value)

        rows = [
            ("seed", self.seed),
            ("retrieval_accuracy", self.retrieval_accuracy),
            ("response_accuracy", self.response_accuracy),
            ("leakage_rate", self.leakage_rate),
            ("probes", self.probes),
            ("assemblies", self.assemblies),
            ("post_erasure_assemblies", self.post_erasure_assemblies),
            ("hot_path_refresh_calls", self.hot_path_refresh_calls),
            ("reminders_delivered", f"{self.reminders_delivered}/{self.reminders_expected}"),
            ("reminder_duplicates", self.reminder_duplicates),
        ]
        if include_latency:
            rows += [("assembly_latency_p50_ms", self.assembly_latency_p50_ms),
                     ("assembly_latency_p95_ms", self.assembly_latency_p95_ms)]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name.ljust(width)}  {fmt(value)}" for name, value in rows]
        for miss in self.misses:
            lines.append(f"miss: fact {miss['fact']} ({miss['attribute']}) in session {miss['session']}")
        return "\n".join(lines)


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; 0.0 for no values."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, int(math.ceil(q / 100.0 * len(ordered))))
    return round(ordered[rank - 1], 3)


def _build_system(corpus: SyntheticCorpus, policy: Policy, budget: TokenBudget,
                  backend: Optional[GenerationBackend]) -> Tuple[MemorySystem, FakeClock]:
    clock = FakeClock(EPOCH_MS)
    store = RecordStore.in_memory(Keyring.ephemeral(), clock)
    system = MemorySystem(store, backend or MockBackend(), clock, SequentialIds(f"c{corpus.seed}"), policy, budget)
    return system, clock


def _replay(corpus: SyntheticCorpus, system: MemorySystem, clock: FakeClock, on_turn=None) -> None:
    """Drive every session through the full stack in order."""
    user = corpus.user_id
    probes_by_session: Dict[int, List[PlantedFact]] = {}
    for fact in corpus.planted_facts:
        probes_by_session.setdefault(fact.probe_session, []).append(fact)

    for session in corpus.sessions:
        clock.set(session.start_ms)
        erasures = [e for e in corpus.erasures if e.session == session.index]
        for event in corpus.scheduled_events:
            if event.scheduled_session == session.index:
                fire_at = corpus.sessions[event.fire_session].start_ms + EVENT_OFFSET_MS
                system.episodic.add_event(user, fire_at, event.payload)
        system.controller.proactive_tick(user, session.start_ms)

        steps = [(text, None) for text in session.turns]
        steps += [(fact.probe_query, fact) for fact in probes_by_session.get(session.index, [])]
        for n, (text, probe) in enumerate(steps):
            clock.set(session.start_ms + (n + 1) * MINUTE_MS)
            for erasure in erasures:
                if erasure.step == n:
                    system.forget(user, ForgetSelector.fact(erasure.value))
            try:
                turn = system.chat_turn(user, session.session_id, text)
            except Exception as e:
                logger.error(f"Turn {n} of session {session.index} failed: {str(e)}", exc_info=True)
                continue
            if on_turn:
                on_turn(session, n, text, probe, turn)

        job = system.end_session(user, session.session_id)
        job.result()


def run_suite(corpus: SyntheticCorpus, budget: Optional[TokenBudget] = None, policy: Optional[Policy] = None,
              backend: Optional[GenerationBackend] = None, trace_dir: Optional[str] = None) -> MetricsReport:
    budget = budget or TokenBudget()
    policy = policy or PRESETS[PolicyName.RECENCY_FIRST]
    system, clock = _build_system(corpus, policy, budget, backend)
    erased_facts = corpus.erased_indexes()
    payloads = {e.payload: e.index for e in corpus.scheduled_events}
    deliveries = {e.index: 0 for e in corpus.scheduled_events}
    latencies: List[float] = []
    misses: List[Dict] = []
    traces: List[Dict] = []
    counts = {"probes": 0, "hits": 0, "response_hits": 0, "post_erasure": 0, "leaked": 0}

    def on_turn(session, n, text, probe, turn):
        latencies.append(turn.assemble_ms)
        prompt = turn.assembly.text().lower()
        for segment in turn.assembly.segments:
            if segment.kind == "reminder":
                for payload, index in payloads.items():
                    if payload in segment.content:
                        deliveries[index] += 1
        active = [e.value for e in corpus.erasures if e.active_at(session.index, n)]
        if active:
            counts["post_erasure"] += 1
            if any(v.lower() in prompt for v in active):
                counts["leaked"] += 1
        if probe is not None and probe.index not in erased_facts:
            counts["probes"] += 1
            if probe.value.lower() in prompt:
                counts["hits"] += 1
            else:
                misses.append({"fact": probe.index, "attribute": probe.attribute, "session": session.index,
                               "reason": "value absent from assembled prompt"})
            if probe.value.lower() in turn.response.lower():
                counts["response_hits"] += 1
        traces.append({"session": session.index, "step": n, "probe": probe.index if probe else None,
                       "assembly": turn.assembly.to_dict()})

    try:
        _replay(corpus, system, clock, on_turn)
        hot_path_calls = system.longterm.hot_path_refresh_calls
    finally:
        system.close()

    if trace_dir:
        dump_traces(traces, trace_dir)

    probes = counts["probes"]
    report = MetricsReport(
        seed=corpus.seed,
        retrieval_accuracy=counts["hits"] / probes if probes else None,
        response_accuracy=counts["response_hits"] / probes if probes else None,
        leakage_rate=counts["leaked"] / counts["post_erasure"] if counts["post_erasure"] else 0.0,
        assembly_latency_p50_ms=percentile(latencies, 50),
        assembly_latency_p95_ms=percentile(latencies, 95),
        hot_path_refresh_calls=hot_path_calls,
        probes=probes,
        hits=counts["hits"],
        assemblies=len(traces),
        post_erasure_assemblies=counts["post_erasure"],
        leaked_assemblies=counts["leaked"],
        reminders_expected=len(deliveries),
        reminders_delivered=sum(1 for c in deliveries.values() if c),
        reminder_duplicates=sum(max(0, c - 1) for c in deliveries.values()),
        misses=misses,
        config={
            "budget": budget.total,
            "policy": policy.name.value,
            "sessions": len(corpus.sessions),
            "facts": len(corpus.planted_facts),
            "erasures": len(corpus.erasures),
            "events": len(corpus.scheduled_events),
        },
    )
    logger.info(f"Suite for seed {corpus.seed}: accuracy={report.retrieval_accuracy} leakage={report.leakage_rate}")
    return report


def dump_traces(traces: List[Dict], trace_dir: str) -> str:
    """One JSON line per assembly, for checking metrics independently."""
    os.makedirs(trace_dir, exist_ok=True)
    path = os.path.join(trace_dir, TRACE_FILE)
    with open(path, "w") as f:
        for record in traces:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def load_traces(trace_dir: str) -> List[Dict]:
    with open(os.path.join(trace_dir, TRACE_FILE)) as f:
        return [json.loads(line) for line in f if line.strip()]


def sweep_budget(corpus: SyntheticCorpus, scales: Sequence[float], budget: Optional[TokenBudget] = None,
                 policy: Optional[Policy] = None) -> List[Tuple[float, MetricsReport]]:
    """Metrics at each budget scale, showing how pruning trades off against recall."""
    budget = budget or TokenBudget()
    return [(scale, run_suite(corpus, budget.scaled(scale), policy)) for scale in scales]


def stress_latency(corpus: SyntheticCorpus, workers: int = 4, rounds: int = 5,
                   budget: Optional[TokenBudget] = None, policy: Optional[Policy] = None) -> Dict:
    """Parallel assembly latency over a replayed corpus; not deterministic."""
    system, clock = _build_system(corpus, policy or PRESETS[PolicyName.RECENCY_FIRST], budget or TokenBudget(), None)
    queries = [f.probe_query for f in corpus.planted_facts] or list(FILLER)
    try:
        _replay(corpus, system, clock)

        def assemble(n):
            session_id = f"stress-{n % workers}"
            started = time.perf_counter()
            system.controller.assemble_prompt(corpus.user_id, session_id, queries[n % len(queries)])
            return (time.perf_counter() - started) * 1000.0

        with ThreadPoolExecutor(max_workers=workers) as pool:
            latencies = list(pool.map(assemble, range(workers * rounds * len(queries))))
    finally:
        system.close()
    return {
        "workers": workers,
        "assemblies": len(latencies),
        "p50_ms": percentile(latencies, 50),
        "p95_ms": percentile(latencies, 95),
    }

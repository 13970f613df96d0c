import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional

from memory.base import MemorySource, count_tokens
from memory.clock import DAY_MS
from memory.errors import ConfigError
from memory.text import cosine_tf

DEFAULT_TAU_MS = DAY_MS


class PolicyName(str, Enum):
    RECENCY_FIRST = "recency_first"
    USER_CENTRIC = "user_centric"
    TASK_DRIVEN = "task_driven"

    @property
    def rank(self) -> int:
        return list(PolicyName).index(self)


def _source_weights(default: float, **overrides) -> Dict[MemorySource, float]:
    weights = {source: default for source in MemorySource}
    for name, value in overrides.items():
        weights[MemorySource(name)] = value
    return weights


@dataclass(frozen=True)
class Policy:
    name: PolicyName
    w_recency: float
    w_relevance: float
    w_source: float
    source_weights: Dict[MemorySource, float] = field(default_factory=lambda: _source_weights(1.0))
    tau_ms: int = DEFAULT_TAU_MS

    def validate(self) -> "Policy":
        weights = (self.w_recency, self.w_relevance, self.w_source)
        if any(w < 0 for w in weights):
            raise ConfigError(f"Policy {self.name.value} has a negative weight")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError(f"Policy {self.name.value} weights must sum to 1, got {sum(weights)}")
        for source, weight in self.source_weights.items():
            if not 0.0 <= weight <= 1.0:
                raise ConfigError(f"Source weight for {source.value} out of range: {weight}")
        if self.tau_ms <= 0:
            raise ConfigError("tau_ms must be positive")
        return self

    def scaled(self, factor: float) -> "Policy":
        """Same policy with every weight multiplied by factor; orderings are unchanged."""
        return replace(
            self,
            w_recency=self.w_recency * factor,
            w_relevance=self.w_relevance * factor,
            w_source=self.w_source * factor,
        )

    def source_weight(self, source: MemorySource) -> float:
        return self.source_weights.get(MemorySource(source), 0.0)

    def to_dict(self) -> Dict:
        return {
            "name": self.name.value,
            "w_recency": self.w_recency,
            "w_relevance": self.w_relevance,
            "w_source": self.w_source,
            "source_weights": {s.value: w for s, w in sorted(self.source_weights.items(), key=lambda i: i[0].value)},
            "tau_ms": self.tau_ms,
        }


PRESETS: Dict[PolicyName, Policy] = {
    PolicyName.RECENCY_FIRST: Policy(PolicyName.RECENCY_FIRST, 0.7, 0.2, 0.1, _source_weights(1.0)),
    PolicyName.USER_CENTRIC: Policy(PolicyName.USER_CENTRIC, 0.2, 0.3, 0.5,
                                    _source_weights(0.5, long_term_user=1.0)),
    PolicyName.TASK_DRIVEN: Policy(PolicyName.TASK_DRIVEN, 0.2, 0.3, 0.5, _source_weights(0.5, working=1.0)),
}


def policy_for(name, overrides: Optional[Dict] = None) -> Policy:
    """Preset by name, optionally with weight overrides from config."""
    try:
        preset = PRESETS[PolicyName(name)]
    except ValueError:
        raise ConfigError(f"Unknown policy '{name}'")
    if not overrides:
        return preset
    changes = {k: v for k, v in overrides.items() if k in ("w_recency", "w_relevance", "w_source", "tau_ms")}
    unknown = set(overrides) - set(changes) - {"source_weights"}
    if unknown:
        raise ConfigError(f"Unknown policy keys: {', '.join(sorted(unknown))}")
    if "source_weights" in overrides:
        weights = dict(preset.source_weights)
        for source, weight in overrides["source_weights"].items():
            try:
                weights[MemorySource(source)] = float(weight)
            except ValueError:
                raise ConfigError(f"Unknown memory source '{source}'")
        changes["source_weights"] = weights
    return replace(preset, **changes).validate()


@dataclass(frozen=True)
class RetrievedItem:
    source: MemorySource
    content: str
    ts_ms: int
    relevance: float = 0.0
    score: float = 0.0
    ref: str = ""

    @property
    def token_count(self) -> int:
        return count_tokens(self.content)

    def to_dict(self) -> Dict:
        return {
            "source": self.source.value,
            "content": self.content,
            "ts_ms": self.ts_ms,
            "relevance": round(self.relevance, 6),
            "score": round(self.score, 6),
            "ref": self.ref,
        }


def recency(ts_ms: int, now_ms: int, tau_ms: int) -> float:
    # items stamped in the future count as current
    return math.exp(-max(0, now_ms - ts_ms) / tau_ms)


def score_item(item: RetrievedItem, query_text: str, now_ms: int, policy: Policy) -> float:
    return (policy.w_recency * recency(item.ts_ms, now_ms, policy.tau_ms)
            + policy.w_relevance * cosine_tf(query_text, item.content)
            + policy.w_source * policy.source_weight(item.source))


def rank_items(items: Iterable[RetrievedItem], query_text: str, now_ms: int, policy: Policy) -> List[RetrievedItem]:
    """Scored copies, best first; ties go to the earlier item, then lexicographic content."""
    scored = [
        replace(item, relevance=cosine_tf(query_text, item.content), score=score_item(item, query_text, now_ms, policy))
        for item in items
    ]
    return sorted(scored, key=lambda i: (-i.score, i.ts_ms, i.content))


class ResponseScorer(ABC):
    @abstractmethod
    def score(self, response: str, trait_values: List[str], recent_turns: List[str]) -> Dict[str, float]:
        """Component scores plus their combination under "total"."""
        pass


class CompositeResponseScorer(ResponseScorer):
    """Personalization (trait overlap), coherence (recent-turn overlap) and length utility."""

    def __init__(self, w_personal: float = 0.4, w_coherence: float = 0.4, w_utility: float = 0.2,
                 target_tokens: int = 64):
        self.w_personal = w_personal
        self.w_coherence = w_coherence
        self.w_utility = w_utility
        self.target_tokens = target_tokens

    def score(self, response, trait_values, recent_turns):
        personal = cosine_tf(response, " ".join(trait_values))
        coherence = cosine_tf(response, " ".join(recent_turns))
        utility = min(1.0, count_tokens(response) / self.target_tokens)
        return {
            "personalization": personal,
            "coherence": coherence,
            "utility": utility,
            "total": self.w_personal * personal + self.w_coherence * coherence + self.w_utility * utility,
        }

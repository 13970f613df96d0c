import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Union

from memory.clock import Clock, IdFactory, SystemClock
from memory.errors import BudgetError

DEFAULT_BUDGET_TOKENS = 90000
MAX_MESSAGE_TOKENS = 32768


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"
    SYSTEM = "system"


class MemorySource(str, Enum):
    CONVERSATIONAL = "conversational"
    LONG_TERM_USER = "long_term_user"
    EPISODIC_EVENT = "episodic_event"
    ROUTINE = "routine"
    CONTEXT = "context"
    WORKING = "working"


class TokenCounter(ABC):
    @abstractmethod
    def count(self, text: str) -> int:
        pass


class ByteHeuristicCounter(TokenCounter):
    """ceil(utf-8 bytes / 4)"""

    def count(self, text: str) -> int:
        return (len(text.encode("utf-8")) + 3) // 4


_counter: TokenCounter = ByteHeuristicCounter()


def set_token_counter(counter: TokenCounter) -> TokenCounter:
    """Install another tokenizer; returns the previous one."""
    global _counter
    previous, _counter = _counter, counter
    return previous


def count_tokens(text: str) -> int:
    return _counter.count(text)


def truncate_to_tokens(text: str, cap: int) -> str:
    """Longest prefix of text (cut on a UTF-8 boundary) holding at most cap tokens."""
    if cap <= 0:
        return ""
    if count_tokens(text) <= cap:
        return text
    raw = text.encode("utf-8")[: cap * 4]
    cut = raw.decode("utf-8", errors="ignore")
    while cut and count_tokens(cut) > cap:
        cut = cut[:-1]
    return cut


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    reason: Optional[str] = None

    def __bool__(self):
        return self.valid


VALID = ValidationResult(True)


def validate_message(role: Union[Role, str], content: Optional[str],
                     max_tokens: int = MAX_MESSAGE_TOKENS) -> ValidationResult:
    if content is None or not str(content).strip():
        return ValidationResult(False, "empty")
    try:
        Role(role)
    except ValueError:
        return ValidationResult(False, "unknown_role")
    if count_tokens(content) > max_tokens:
        return ValidationResult(False, "oversize")
    return VALID


@dataclass(frozen=True)
class Message:
    id: str
    session_id: str
    role: str
    content: str
    timestamp: int
    token_count: int

    @classmethod
    def create(cls, session_id: str, role: Union[Role, str], content: str,
               ts_ms: Optional[int] = None, clock: Optional[Clock] = None,
               ids: Optional[IdFactory] = None, message_id: Optional[str] = None) -> "Message":
        role_value = role.value if isinstance(role, Role) else str(role)
        if ts_ms is None:
            ts_ms = (clock or SystemClock()).now_ms()
        return cls(
            id=message_id or (ids or IdFactory())(),
            session_id=session_id,
            role=role_value,
            content=content if content is not None else "",
            timestamp=int(ts_ms),
            token_count=count_tokens(content or ""),
        )

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "session_id": self.session_id,
            "role": self.role,
            "ts_ms": self.timestamp,
            "content": self.content,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict) -> "Message":
        content = data.get("content", "")
        return cls(
            id=str(data["id"]),
            session_id=str(data["session_id"]),
            role=str(data["role"]),
            content=content,
            timestamp=int(data["ts_ms"]),
            token_count=count_tokens(content),
        )

    @classmethod
    def from_json(cls, line: str) -> "Message":
        return cls.from_dict(json.loads(line))


def dump_jsonl(messages: Iterable[Message]) -> str:
    return "".join(m.to_json() + "\n" for m in messages)


def load_jsonl(text: str) -> List[Message]:
    return [Message.from_json(line) for line in text.splitlines() if line.strip()]


DEFAULT_FRACTIONS = {
    MemorySource.LONG_TERM_USER: 0.10,
    MemorySource.CONTEXT: 0.05,
    MemorySource.EPISODIC_EVENT: 0.05,
    MemorySource.WORKING: 0.10,
    MemorySource.CONVERSATIONAL: 0.70,
}


@dataclass(frozen=True)
class TokenBudget:
    total: int = DEFAULT_BUDGET_TOKENS
    per_layer_fractions: Dict[MemorySource, float] = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))

    def __post_init__(self):
        if self.total <= 0:
            raise BudgetError(f"Token budget must be positive, got {self.total}")
        for source, fraction in self.per_layer_fractions.items():
            if not 0.0 <= fraction <= 1.0:
                raise BudgetError(f"Fraction for {source} out of range: {fraction}")
        if sum(self.per_layer_fractions.values()) > 1.0 + 1e-9:
            raise BudgetError("Budget fractions sum to more than 1.0")

    def fraction(self, source: MemorySource) -> float:
        return self.per_layer_fractions.get(source, 0.0)

    def scaled(self, factor: float) -> "TokenBudget":
        return TokenBudget(max(1, int(math.floor(self.total * factor))), dict(self.per_layer_fractions))

import math
import re
from collections import Counter
from typing import Dict, Iterable, List, Optional, Set

from whoosh.analysis import LowercaseFilter, RegexTokenizer, StopFilter

# Plain lowercase words; relevance is computed over these.
_word_analyzer = RegexTokenizer(r"\w+") | LowercaseFilter()
# Content words, for topics and probe overlap.
_content_analyzer = RegexTokenizer(r"\w+") | LowercaseFilter() | StopFilter(minsize=2)

_SENTENCE_END = re.compile(r"[.!?]")
FIRST_SENTENCE_MAX_BYTES = 160


def words(text: str) -> List[str]:
    return [token.text for token in _word_analyzer(text or "")]


def content_words(text: str) -> List[str]:
    return [token.text for token in _content_analyzer(text or "")]


def term_frequencies(text: str) -> Dict[str, int]:
    return Counter(words(text))


def cosine_tf(a: str, b: str) -> float:
    """Cosine similarity of lowercase-word term-frequency vectors, in [0, 1]."""
    tf_a = term_frequencies(a)
    tf_b = term_frequencies(b)
    if not tf_a or not tf_b:
        return 0.0
    dot = sum(count * tf_b.get(term, 0) for term, count in tf_a.items())
    if dot == 0:
        return 0.0
    norm_a = math.sqrt(sum(c * c for c in tf_a.values()))
    norm_b = math.sqrt(sum(c * c for c in tf_b.values()))
    return min(1.0, dot / (norm_a * norm_b))


def first_sentence(text: str) -> str:
    """Up to and including the first '.', '!' or '?', capped at 160 UTF-8 bytes."""
    text = (text or "").strip()
    match = _SENTENCE_END.search(text)
    sentence = text[: match.end()] if match else text
    raw = sentence.encode("utf-8")
    if len(raw) > FIRST_SENTENCE_MAX_BYTES:
        sentence = raw[:FIRST_SENTENCE_MAX_BYTES].decode("utf-8", errors="ignore")
    return sentence.strip()


def split_sentences(text: str) -> List[str]:
    parts = re.split(r"(?<=[.!?])\s+", (text or "").strip())
    return [p.strip() for p in parts if p.strip()]


def top_term(text: str) -> Optional[str]:
    """Most frequent content word; ties go to the alphabetically first."""
    counts = Counter(content_words(text))
    if not counts:
        return None
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))[0][0]


ERASURE_WINDOW_BYTES = 16


class ErasedContent:
    """Fragments of forgotten text, compared case-insensitively as UTF-8.

    A text matches when it contains a fragment of at most 16 bytes outright,
    or any 16-byte window of a longer fragment.
    """

    def __init__(self, fragments: Iterable[str] = ()):
        self._short: Set[bytes] = set()
        self._windows: Set[bytes] = set()
        self.add(*fragments)

    def add(self, *fragments: str) -> None:
        size = ERASURE_WINDOW_BYTES
        for fragment in fragments:
            raw = (fragment or "").strip().lower().encode("utf-8")
            if not raw:
                continue
            if len(raw) <= size:
                self._short.add(raw)
            else:
                self._windows.update(raw[i:i + size] for i in range(len(raw) - size + 1))

    def matches(self, text: str) -> bool:
        haystack = (text or "").lower().encode("utf-8")
        if any(fragment in haystack for fragment in self._short):
            return True
        size = ERASURE_WINDOW_BYTES
        return any(haystack[i:i + size] in self._windows for i in range(len(haystack) - size + 1))

    def scrub(self, texts: Iterable[str]) -> List[str]:
        return [t for t in texts if not self.matches(t)]

    def __bool__(self) -> bool:
        return bool(self._short or self._windows)

import pytest

from memory.conversation import ConversationMemory
from memory.longterm import LongTermUserMemory
from memory.working import WorkingMemory


@pytest.fixture
def working(clock):
    return WorkingMemory(clock)


def test_set_then_get(working):
    working.set_item("s1", "goal", "book a table")
    assert working.get_item("s1", "goal") == "book a table"
    assert working.get_item("s1", "missing") is None
    assert working.get_item("other", "goal") is None


def test_overwrite_same_key(working):
    working.set_item("s1", "goal", "book a table")
    working.set_item("s1", "goal", "cancel the table")
    assert [i.value for i in working.items("s1")] == ["cancel the table"]


def test_oldest_evicted_at_equal_priority(working, clock):
    for i in range(65):
        clock.advance(1)
        working.set_item("s1", f"k{i}", f"v{i}")
    assert working.get_item("s1", "k0") is None
    assert working.get_item("s1", "k64") == "v64"
    assert len(working.items("s1")) == 64


def test_low_priority_evicted_first(clock):
    working = WorkingMemory(clock, capacity=2)
    working.set_item("s1", "pinned", "keep me", priority=5)
    working.set_item("s1", "a", "first")
    working.set_item("s1", "b", "second")
    assert working.get_item("s1", "pinned") == "keep me"
    assert working.get_item("s1", "a") is None
    # same timestamp: insertion order breaks the tie
    assert [i.key for i in working.items("s1")] == ["pinned", "b"]


def test_clear_session_is_isolated(working):
    for key in ["a", "b", "c"]:
        working.set_item("s1", key, key.upper())
    working.set_item("s2", "a", "other")
    assert working.clear_session("s1") == 3
    assert working.items("s1") == []
    assert working.get_item("s2", "a") == "other"
    assert working.clear_session("unknown") == 0


def test_scratchpad_never_reaches_the_store(store, clock, ids):
    working = WorkingMemory(clock)
    ConversationMemory(store, clock, ids).remember_turn("s1", "user", "hello", clock.now_ms())
    longterm = LongTermUserMemory(store, clock)
    longterm.set_trait("ada", "diet", "vegetarian")
    working.set_item("s1", "draft", "Scratchpad-only draft reply text")
    assert b"Scratchpad-only" not in store.raw_bytes()
    assert WorkingMemory(clock).items("s1") == []
    longterm.close()


def test_rejects_bad_arguments(clock):
    with pytest.raises(ValueError):
        WorkingMemory(clock, capacity=0)
    with pytest.raises(ValueError):
        WorkingMemory(clock).set_item("s1", "  ", "x")

import random

import pytest

from memory.base import Message, Role, count_tokens
from memory.conversation import ConversationMemory, summarize_dropped
from memory.errors import BudgetError, PartialBatchError, StorageError
from memory.storage import RecordStore
from memory.text import ErasedContent


@pytest.fixture
def conversation(store, clock, ids):
    return ConversationMemory(store, clock, ids)


def six_token_turns(n):
    # 6 tokens each
    return [f"turn number {i:02d} here..." for i in range(n)]


def test_remember_valid_and_empty(conversation):
    assert conversation.remember_turn("s1", Role.USER, "hola", 1).stored
    skipped = conversation.remember_turn("s1", Role.USER, "   ", 2)
    assert skipped.status == "skipped" and skipped.reason == "empty"
    assert len(conversation.log("s1").messages) == 1


def test_timestamps_never_go_backwards(conversation):
    conversation.remember_turn("s1", Role.USER, "first", 100)
    stored = conversation.remember_turn("s1", Role.ASSISTANT, "second", 50)
    assert stored.message.timestamp == 100


def test_batch_is_positionally_aligned(conversation):
    batch = [
        Message.create("s1", Role.USER, "one", ts_ms=1),
        Message.create("s1", Role.USER, "", ts_ms=2),
        Message.create("s1", Role.ASSISTANT, "three", ts_ms=3),
    ]
    results = conversation.remember_batch("s1", batch)
    assert [r.status for r in results] == ["stored", "skipped", "stored"]
    assert conversation.remember_batch("s1", []) == []


def test_batch_of_hundred_keeps_order(conversation):
    batch = [Message.create("s1", Role.USER, f"message {i}", ts_ms=i) for i in range(100)]
    conversation.remember_batch("s1", batch)
    messages, report = conversation.history("s1")
    assert [m.content for m in messages] == [f"message {i}" for i in range(100)]
    assert report.dropped_count == 0


def test_partial_batch_reports_progress(conversation, monkeypatch):
    calls = {"n": 0}
    original = conversation.store.put_record

    def failing_put(key, plaintext, kek_id=None):
        calls["n"] += 1
        if calls["n"] == 3:
            raise StorageError("disk full")
        return original(key, plaintext, kek_id)

    monkeypatch.setattr(conversation.store, "put_record", failing_put)
    batch = [Message.create("s1", Role.USER, f"m{i}", ts_ms=i) for i in range(5)]
    with pytest.raises(PartialBatchError) as excinfo:
        conversation.remember_batch("s1", batch)
    assert len(excinfo.value.results) == 2
    assert len(conversation.log("s1").messages) == 2


def test_history_keeps_maximal_suffix(conversation):
    for i, text in enumerate(six_token_turns(3)):
        conversation.remember_turn("s1", Role.USER, text, i)
    messages, report = conversation.history("s1", budget=10)
    assert report.dropped_count == 2
    assert report.dropped_tokens == 12
    kept = [m for m in messages if m.role != Role.SYSTEM.value]
    assert [m.content for m in kept] == [six_token_turns(3)[2]]
    assert sum(count_tokens(m.content) for m in messages) <= 10


def test_history_exact_budget_keeps_everything(conversation):
    for i, text in enumerate(six_token_turns(3)):
        conversation.remember_turn("s1", Role.USER, text, i)
    messages, report = conversation.history("s1", budget=18)
    assert len(messages) == 3
    assert report.dropped_count == 0 and report.summary is None


def test_history_default_budget_no_drops(conversation):
    for i in range(10):
        conversation.remember_turn("s1", Role.USER if i % 2 == 0 else Role.ASSISTANT, "x" * 200, i)
    messages, report = conversation.history("s1")
    assert len(messages) == 10
    assert report.dropped_count == 0


def test_history_unknown_session_is_empty(conversation):
    messages, report = conversation.history("nope", 100)
    assert messages == [] and report.dropped_count == 0
    with pytest.raises(BudgetError):
        conversation.history("s1", 0)


def test_history_budget_safety_and_maximality(store, clock, ids):
    rng = random.Random(17)
    for trial in range(200):
        conversation = ConversationMemory(store, clock, ids)
        session = f"prop-{trial}"
        for i in range(rng.randint(1, 12)):
            words = " ".join(rng.choice(["alpha.", "beta", "gamma!", "delta?", "epsilon"])
                             for _ in range(rng.randint(1, 20)))
            conversation.remember_turn(session, Role.USER, words, i)
        budget = rng.randint(1, 60)
        messages, report = conversation.history(session, budget)
        assert sum(count_tokens(m.content) for m in messages) <= budget
        log = conversation.log(session).messages
        kept = [m for m in messages if m.role != Role.SYSTEM.value]
        assert kept == log[len(log) - len(kept):]
        if report.dropped_count:
            oldest_dropped = log[report.dropped_count - 1]
            assert sum(m.token_count for m in kept) + oldest_dropped.token_count > budget


def test_summary_replaces_dropped_turns(conversation):
    conversation.remember_turn("s1", Role.USER, "I live in Rome. I like pasta.", 1)
    conversation.remember_turn("s1", Role.USER, "x" * 40, 2)
    messages, report = conversation.history("s1", budget=16)
    assert report.dropped_count == 1
    assert messages[0].role == Role.SYSTEM.value
    assert messages[0].content == "Earlier: I live in Rome."
    assert report.summary == messages[0]


def test_summarizer_can_be_disabled(store, clock, ids):
    conversation = ConversationMemory(store, clock, ids, summarize=False)
    conversation.remember_turn("s1", Role.USER, "I live in Rome. I like pasta.", 1)
    conversation.remember_turn("s1", Role.USER, "x" * 40, 2)
    messages, report = conversation.history("s1", budget=16)
    assert report.dropped_count == 1 and report.summary is None
    assert len(messages) == 1


def test_summarize_dropped_examples():
    one = [Message.create("s", Role.USER, "I live in Rome. I like pasta.", ts_ms=1)]
    assert summarize_dropped(one, 100) == "Earlier: I live in Rome."
    two = one + [Message.create("s", Role.ASSISTANT, "Rome is lovely! Which part?", ts_ms=2)]
    assert summarize_dropped(two, 100) == "Earlier: I live in Rome.; Rome is lovely!"
    with pytest.raises(ValueError):
        summarize_dropped([], 10)


def test_summarize_dropped_respects_cap():
    rng = random.Random(23)
    for _ in range(1000):
        dropped = [Message.create("s", Role.USER, "".join(rng.choice("abc. é!") for _ in range(rng.randint(1, 300))),
                                  ts_ms=1) for _ in range(rng.randint(1, 4))]
        cap = rng.randint(1, 50)
        assert count_tokens(summarize_dropped(dropped, cap)) <= cap


def test_logs_reload_from_store(store, clock, ids):
    first = ConversationMemory(store, clock, ids)
    first.remember_turn("s1", Role.USER, "remember me", 1)
    second = ConversationMemory(store, clock, ids)
    assert [m.content for m in second.log("s1").messages] == ["remember me"]
    assert second.sessions() == ["s1"]


def test_jsonl_export_import(conversation, clock, ids):
    conversation.remember_turn("s1", Role.USER, "hello there", 1)
    conversation.remember_turn("s1", Role.ASSISTANT, "hi", 2)
    exported = conversation.export_jsonl("s1")
    other = ConversationMemory(RecordStore.in_memory(clock=clock), clock, ids)
    results = other.import_jsonl(exported)
    assert all(r.stored for r in results)
    assert other.export_jsonl("s1") == exported


def test_sessions_are_bound_to_their_user(store, clock, ids):
    conversation = ConversationMemory(store, clock, ids)
    conversation.remember_turn("s1", Role.USER, "hi", 1, user_id="ada")
    conversation.remember_turn("s2", Role.USER, "hi", 2, user_id="ada")
    conversation.remember_turn("s3", Role.USER, "hi", 3, user_id="bob")
    conversation.remember_turn("s4", Role.USER, "anonymous", 4)
    assert conversation.user_sessions("ada") == ["s1", "s2"]
    assert conversation.log("s1").user_id == "ada"
    # the index survives a restart
    assert ConversationMemory(store, clock, ids).user_sessions("bob") == ["s3"]


def test_redact_shreds_matching_turns(conversation):
    conversation.remember_turn("s1", Role.USER, "My dog is Pixel.", 1, user_id="ada")
    conversation.remember_turn("s1", Role.ASSISTANT, "Reply to: My dog is Pixel. | known:", 2)
    conversation.remember_turn("s1", Role.USER, "What is the weather?", 3)
    content = ErasedContent()
    content.add("pixel")
    assert conversation.redact("ada", content) == 2
    log = conversation.log("s1")
    assert [m.content for m in log.messages] == ["What is the weather?"]
    assert log.total_tokens == count_tokens("What is the weather?")
    assert len(conversation.store.list_keys("conv", "s1")) == 1
    assert conversation.redact("ada", ErasedContent()) == 0
    assert conversation.redact("bob", content) == 0


def test_record_ids_are_not_reused_after_redaction(store, clock, ids):
    first = ConversationMemory(store, clock, ids)
    for n, text in enumerate(["keep one", "drop Pixel", "keep two"]):
        first.remember_turn("s1", Role.USER, text, n, user_id="ada")
    content = ErasedContent()
    content.add("pixel")
    first.redact("ada", content)
    first.remember_turn("s1", Role.USER, "keep three", 5)

    second = ConversationMemory(store, clock, ids)
    second.remember_turn("s1", Role.USER, "keep four", 6)
    record_ids = sorted(k.record_id for k in store.list_keys("conv", "s1"))
    assert record_ids == ["0000000000", "0000000002", "0000000003", "0000000004"]
    assert [m.content for m in second.log("s1").messages] == ["keep one", "keep two", "keep three", "keep four"]


def test_forget_user_erases_every_session(store, clock, ids):
    conversation = ConversationMemory(store, clock, ids)
    conversation.remember_turn("s1", Role.USER, "one", 1, user_id="ada")
    conversation.remember_turn("s2", Role.USER, "two", 2, user_id="ada")
    conversation.remember_turn("s3", Role.USER, "three", 3, user_id="bob")
    assert conversation.forget_user("ada") == 2
    assert conversation.user_sessions("ada") == []
    assert conversation.log("s1").messages == []
    assert [m.content for m in conversation.log("s3").messages] == ["three"]

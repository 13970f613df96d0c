import logging

import pytest

from memory.backend import SilentMockBackend
from memory.base import TokenBudget
from memory.harness import generate_corpus, load_traces, percentile, run_suite, sweep_budget
from memory.policy import PRESETS, PolicyName
from memory.text import content_words

logger = logging.getLogger(__name__)


def test_corpus_is_deterministic():
    first = generate_corpus(11, n_sessions=6, n_facts=8, n_erasures=2, n_events=3)
    second = generate_corpus(11, n_sessions=6, n_facts=8, n_erasures=2, n_events=3)
    assert first.to_json() == second.to_json()
    assert generate_corpus(12, n_sessions=6, n_facts=8).to_json() != first.to_json()


def test_corpus_shape():
    corpus = generate_corpus(3, n_sessions=8, n_facts=12, n_erasures=4, n_events=2)
    assert len(corpus.sessions) == 8
    assert len({f.value.lower() for f in corpus.planted_facts}) == 12
    assert [f.index for f in corpus.planted_facts if f.in_session] == [11]
    for fact in corpus.planted_facts:
        if fact.in_session:
            turns = corpus.sessions[fact.planted_session].turns
            assert turns.index(fact.text) == 10
            assert len(turns) - turns.index(fact.text) > 400
        else:
            assert fact.planted_session < fact.probe_session
        assert fact.text in corpus.sessions[fact.planted_session].turns
        # the probe never gives the answer away
        assert fact.value.lower() not in fact.probe_query.lower()
    for erasure in corpus.erasures:
        fact = corpus.planted_facts[erasure.fact_index]
        assert fact.planted_session < erasure.session <= fact.probe_session
        assert not fact.in_session
        assert 1 <= erasure.step < len(corpus.sessions[erasure.session].turns)
    starts = [s.start_ms for s in corpus.sessions]
    assert starts == sorted(starts)


def test_corpus_rejects_bad_sizes():
    with pytest.raises(ValueError):
        generate_corpus(1, n_sessions=0)
    with pytest.raises(ValueError):
        generate_corpus(1, n_sessions=4, n_facts=2, n_erasures=3)
    with pytest.raises(ValueError):
        generate_corpus(1, n_sessions=1, n_facts=1)
    with pytest.raises(ValueError):
        generate_corpus(1, n_sessions=4, n_facts=4, n_erasures=2, n_session_facts=3)
    assert generate_corpus(1, n_sessions=1, n_facts=1, n_session_facts=1).planted_facts[0].in_session


def test_default_corpus_full_accuracy():
    report = run_suite(generate_corpus(7))
    logger.info(report.table())
    assert report.probes == 20
    assert report.retrieval_accuracy == 1.0
    assert report.misses == []
    assert report.leakage_rate == 0.0
    assert report.hot_path_refresh_calls == 0


def test_same_seed_same_report():
    corpus = generate_corpus(5, n_sessions=6, n_facts=6, n_erasures=2, n_events=2)
    first = run_suite(corpus).to_json(include_latency=False)
    second = run_suite(generate_corpus(5, n_sessions=6, n_facts=6, n_erasures=2, n_events=2))
    assert second.to_json(include_latency=False) == first
    assert "assembly_latency_p50_ms" not in first


def test_no_facts_means_no_accuracy():
    report = run_suite(generate_corpus(2, n_sessions=3, n_facts=0))
    assert report.config["facts"] == 0
    assert report.retrieval_accuracy is None
    assert report.response_accuracy is None
    assert report.probes == 0
    assert "n/a" in report.table()


def test_erasures_never_leak(tmp_path):
    corpus = generate_corpus(21, n_sessions=10, n_facts=10, n_erasures=4)
    report = run_suite(corpus, trace_dir=str(tmp_path))
    assert report.post_erasure_assemblies > 0
    assert report.leakage_rate == 0.0
    assert report.probes == 6

    # recompute leakage straight from the trace file
    traces = load_traces(str(tmp_path))
    assert len(traces) == report.assemblies
    leaked = 0
    for record in traces:
        active = [e.value.lower() for e in corpus.erasures if e.active_at(record["session"], record["step"])]
        text = "\n".join(s["content"] for s in record["assembly"]["segments"]).lower()
        if any(value in text for value in active):
            leaked += 1
    assert leaked == 0


def test_every_fact_asked_once(tmp_path):
    corpus = generate_corpus(4, n_sessions=7, n_facts=9, n_erasures=3)
    run_suite(corpus, trace_dir=str(tmp_path))
    asked = [r["probe"] for r in load_traces(str(tmp_path)) if r["probe"] is not None]
    assert sorted(asked) == list(range(9))
    assert len(asked) == len(set(asked))


def test_reduced_budget_loses_recall():
    corpus = generate_corpus(7)
    budget = TokenBudget().scaled(0.05)
    assert budget.total == 4500
    report = run_suite(corpus, budget=budget)
    assert report.retrieval_accuracy < 1.0
    assert report.misses
    # the bio still fits, so only turns pruned from a long session are lost
    in_session = {f.index for f in corpus.planted_facts if f.in_session}
    assert in_session
    assert {m["fact"] for m in report.misses} == in_session
    assert all(m["reason"] == "value absent from assembled prompt" for m in report.misses)


def test_reminders_delivered_once():
    corpus = generate_corpus(9, n_sessions=6, n_facts=2, n_events=4)
    report = run_suite(corpus)
    assert report.reminders_expected == 4
    assert report.reminders_delivered == 4
    assert report.reminder_duplicates == 0


def test_silent_backend_has_no_response_hits():
    report = run_suite(generate_corpus(7, n_sessions=4, n_facts=3), backend=SilentMockBackend())
    assert report.retrieval_accuracy == 1.0
    assert report.response_accuracy == 0.0


def test_policy_recorded_in_config():
    policy = PRESETS[PolicyName.USER_CENTRIC]
    report = run_suite(generate_corpus(1, n_sessions=3, n_facts=2), policy=policy)
    assert report.config["policy"] == "user_centric"
    assert report.config["facts"] == 2


def test_budget_sweep_is_monotone_at_the_ends():
    corpus = generate_corpus(13, n_sessions=5, n_facts=6)
    results = sweep_budget(corpus, [0.001, 1.0])
    assert [scale for scale, _ in results] == [0.001, 1.0]
    low, high = results[0][1], results[1][1]
    assert low.config["budget"] == 90
    assert low.retrieval_accuracy <= high.retrieval_accuracy == 1.0


def test_percentile():
    assert percentile([], 50) == 0.0
    assert percentile([3.0, 1.0, 2.0], 50) == 2.0
    assert percentile(list(map(float, range(1, 101))), 95) == 95.0


def test_questions_share_content_words_with_their_facts():
    corpus = generate_corpus(7, n_facts=60)
    for fact in corpus.planted_facts:
        shared = set(content_words(fact.probe_query)) & set(content_words(fact.text))
        assert len(shared) >= 2, fact


def test_erasure_happens_while_the_session_is_open(tmp_path):
    corpus = generate_corpus(21, n_sessions=10, n_facts=10, n_erasures=4)
    report = run_suite(corpus, trace_dir=str(tmp_path))
    traces = load_traces(str(tmp_path))
    for erasure in corpus.erasures:
        steps = [r["step"] for r in traces if r["session"] == erasure.session]
        # assemblies on both sides of the erasure within one session
        assert min(steps) < erasure.step <= max(steps)
    assert report.leakage_rate == 0.0

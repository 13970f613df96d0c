import json

import pytest
from click.testing import CliRunner

import mmag
from memory.base import Message, dump_jsonl
from memory.errors import StorageError

SATURDAY_EVENING_MS = 1704564000000


@pytest.fixture
def config_path(tmp_path, monkeypatch):
    for var in ("MMAG_STORE", "MMAG_KEYRING", "MMAG_BACKEND_URL", "MMAG_FAKE_NOW", "MMAG_CONFIG"):
        monkeypatch.delenv(var, raising=False)
    path = tmp_path / "mmag.json"
    path.write_text(json.dumps({
        "store_path": str(tmp_path / "store"),
        "keyring_path": str(tmp_path / "keyring.json"),
        "fake_now": str(SATURDAY_EVENING_MS),
        "durable": False,
    }))
    return str(path)


def run(config_path, *args, input=None):
    return CliRunner().invoke(mmag.cli, ["--config", config_path, *args], input=input, catch_exceptions=False)


@pytest.fixture
def transcript(tmp_path):
    messages = [
        Message("m1", "s1", "user", "My dog is Pixel.", SATURDAY_EVENING_MS, 4),
        Message("m2", "s1", "assistant", "Nice dog!", SATURDAY_EVENING_MS + 1000, 3),
        Message("m3", "s1", "user", "I like hiking on weekends.", SATURDAY_EVENING_MS + 2000, 7),
        Message("m4", "s2", "user", "What is my dog called?", SATURDAY_EVENING_MS + 86400000, 6),
    ]
    path = tmp_path / "transcript.jsonl"
    path.write_text(dump_jsonl(messages))
    return str(path)


def test_replay_is_byte_identical(config_path, transcript):
    first = run(config_path, "replay", transcript)
    second = run(config_path, "replay", transcript)
    assert first.exit_code == 0
    assert first.output == second.output
    lines = [json.loads(line) for line in first.output.splitlines()]
    assert [line["id"] for line in lines] == ["m1", "m3", "m4"]
    # the bio learned at the end of s1 reaches the s2 prompt
    assert "My dog is Pixel." in lines[-1]["response"]


def test_replay_does_not_touch_the_store(config_path, transcript, tmp_path):
    run(config_path, "replay", transcript, "--user", "ada")
    result = run(config_path, "memory", "inspect", "--user", "ada")
    assert json.loads(result.output)["bio_versions"] == []


def test_replay_explain(config_path, transcript):
    result = run(config_path, "replay", transcript, "--explain")
    assert "policy=recency_first" in result.output
    assert "allocation conversation" in result.output


def test_forget_all_then_inspect_is_empty(config_path):
    run(config_path, "memory", "edit", "--user", "u1", "--bio", "I live in Rome.")
    run(config_path, "memory", "edit", "--user", "u1", "--trait", "diet", "--value", "vegetarian")
    before = json.loads(run(config_path, "memory", "inspect", "--user", "u1").output)
    assert len(before["bio_versions"]) == 1
    assert [t["key"] for t in before["traits"]] == ["diet"]

    forgot = run(config_path, "memory", "forget", "--user", "u1", "--all")
    assert forgot.exit_code == 0
    after = json.loads(run(config_path, "memory", "inspect", "--user", "u1").output)
    assert after["bio_versions"] == []
    assert after["traits"] == []
    # every mutation went through the store and left an audit trail
    actions = [e["action"] for e in after["audit"]]
    assert actions.count("put") >= 2
    assert actions.count("erase") >= 2


def test_forget_fact(config_path):
    run(config_path, "memory", "edit", "--user", "u1", "--bio", "My dog is Pixel. I live in Rome.")
    report = json.loads(run(config_path, "memory", "forget", "--user", "u1", "--fact", "pixel").output)
    assert report["rewritten"]
    bio = json.loads(run(config_path, "memory", "inspect", "--user", "u1").output)["bio_versions"]
    assert [b["text"] for b in bio] == ["I live in Rome."]


def test_memory_edit_needs_one_target(config_path):
    assert mmag.main(["--config", config_path, "memory", "edit", "--user", "u1"]) == 1
    assert mmag.main(["--config", config_path, "memory", "forget", "--user", "u1", "--all", "--bio"]) == 1


def test_events_add_and_list(config_path):
    added = json.loads(run(config_path, "events", "add", "--user", "u1", "--at", "2024-01-06T19:00:00",
                           "--payload", "team meeting").output)
    assert added["fire_at_ms"] == SATURDAY_EVENING_MS + 3600000
    assert added["status"] == "pending"
    listed = json.loads(run(config_path, "events", "list", "--user", "u1", "--status", "pending").output)
    assert [e["payload"] for e in listed] == ["team meeting"]


def test_events_in_the_past_is_a_user_error(config_path):
    args = ["--config", config_path, "events", "add", "--user", "u1", "--at", "2023-01-01T00:00:00",
            "--payload", "too late"]
    assert mmag.main(args) == 1
    assert mmag.main(["--config", config_path, "events", "add", "--user", "u1", "--at", "someday",
                      "--payload", "x"]) == 1


def test_routines_show_empty(config_path):
    result = run(config_path, "routines", "show", "--user", "u1")
    assert result.output.strip() == "No routines detected."


def test_eval_run_twice_is_identical(config_path):
    args = ("eval", "run", "--seed", "7", "--sessions", "5", "--facts", "6", "--omit-latency")
    first = run(config_path, *args)
    second = run(config_path, *args)
    assert first.exit_code == 0
    assert first.output == second.output
    report = json.loads(first.output)
    assert report["retrieval_accuracy"] == 1.0
    assert "assembly_latency_p95_ms" not in report


def test_eval_run_table_and_traces(config_path, tmp_path):
    trace_dir = tmp_path / "traces"
    result = run(config_path, "eval", "run", "--sessions", "3", "--facts", "2", "--format", "table",
                 "--trace-dir", str(trace_dir))
    assert "retrieval_accuracy" in result.output
    assert "assembly_latency_p50_ms" in result.output
    assert (trace_dir / "traces.jsonl").exists()


def test_eval_run_at_a_twentieth_of_the_budget_misses_in_session_facts(config_path):
    result = run(config_path, "eval", "run", "--budget-scale", "0.05", "--omit-latency")
    report = json.loads(result.output)
    assert report["config"]["budget"] == 4500
    assert report["retrieval_accuracy"] < 1.0
    assert len(report["misses"]) == 2

    none = json.loads(run(config_path, "eval", "run", "--session-facts", "0", "--omit-latency").output)
    assert none["retrieval_accuracy"] == 1.0


def test_chat_session(config_path):
    script = "My name is Ada.\n/scratch set goal plan dinner\n/scratch\n/end\nhello again\n/quit\n"
    result = run(config_path, "chat", "--user", "ada", "--session", "c1", input=script)
    assert result.exit_code == 0
    lines = result.output.splitlines()
    assert lines[0].startswith("Reply to: My name is Ada.")
    assert "goal=plan dinner (priority 0)" in lines
    assert "Session c1 ended." in lines
    assert "My name is Ada." in lines[-1]


def test_config_check(config_path):
    result = run(config_path, "config", "check")
    assert result.output.strip().endswith("config ok")
    assert mmag.main(["--config", config_path, "config", "check"]) == 0


def test_exit_codes(config_path, tmp_path, monkeypatch):
    assert mmag.main(["--config", config_path, "no-such-command"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"backend": "gpt"}))
    assert mmag.main(["--config", str(bad), "config", "check"]) == 1

    def broken(*args, **kwargs):
        raise StorageError("disk on fire")

    monkeypatch.setattr(mmag, "run_suite", broken)
    assert mmag.main(["--config", config_path, "eval", "run", "--sessions", "2", "--facts", "1"]) == 2

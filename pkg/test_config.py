import json

import pytest

from config import Config
from memory.base import MemorySource
from memory.errors import ConfigError
from memory.policy import PolicyName


def write_config(tmp_path, values):
    path = tmp_path / "mmag.json"
    path.write_text(json.dumps(values))
    return str(path)


def test_defaults_without_file(tmp_path):
    config = Config.load(str(tmp_path / "absent.json"), env={})
    assert config.backend == "mock"
    assert config.budget == 90000
    assert config.default_policy().name == PolicyName.RECENCY_FIRST
    assert config.token_budget().fraction(MemorySource.CONVERSATIONAL) == 0.70


def test_file_then_environment(tmp_path):
    path = write_config(tmp_path, {"store_path": "from-file", "budget": "5000", "log_level": "info"})
    config = Config.load(path, env={"MMAG_STORE": "from-env", "MMAG_FAKE_NOW": "1704564000000"})
    assert config.store_path == "from-env"
    assert config.fake_now == "1704564000000"
    assert config.budget == 5000
    assert config.token_budget(0.5).total == 2500


def test_config_path_from_environment(tmp_path):
    path = write_config(tmp_path, {"policy": "user_centric"})
    config = Config.load(env={"MMAG_CONFIG": path})
    assert config.default_policy().name == PolicyName.USER_CENTRIC


def test_fraction_overrides(tmp_path):
    path = write_config(tmp_path, {"fractions": {"long_term_user": 0.2, "conversational": 0.6}})
    budget = Config.load(path, env={}).token_budget()
    assert budget.fraction(MemorySource.LONG_TERM_USER) == 0.2
    assert budget.fraction(MemorySource.CONTEXT) == 0.05


def test_policy_weight_overrides(tmp_path):
    path = write_config(tmp_path, {"policies": {"task_driven": {"w_recency": 0.1, "w_relevance": 0.4,
                                                                "source_weights": {"working": 0.9}}}})
    policy = Config.load(path, env={}).policy_named("task_driven")
    assert (policy.w_recency, policy.w_relevance, policy.w_source) == (0.1, 0.4, 0.5)
    assert policy.source_weights[MemorySource.WORKING] == 0.9


@pytest.mark.parametrize("values", [
    {"colour": "blue"},
    {"backend": "gpt"},
    {"backend": "remote"},
    {"summarizer": "magic"},
    {"budget": "lots"},
    {"budget": 0},
    {"fractions": {"long_term_user": 0.9, "conversational": 0.9}},
    {"fractions": {"dreams": 0.1}},
    {"policy": "fastest"},
    {"policies": {"user_centric": {"w_speed": 1}}},
    {"providers": {"weather": {"url": "http://x"}}},
    {"log_level": "loud"},
])
def test_invalid_configs(tmp_path, values):
    with pytest.raises(ConfigError):
        Config.load(write_config(tmp_path, values), env={})


def test_unreadable_file(tmp_path):
    path = tmp_path / "mmag.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        Config.load(str(path), env={})
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        Config.load(str(path), env={})


def test_remote_backend_url_from_environment(tmp_path):
    path = write_config(tmp_path, {"backend": "remote"})
    config = Config.load(path, env={"MMAG_BACKEND_URL": "http://chat.local/v1"})
    assert config.backend_url == "http://chat.local/v1"
    assert json.loads(config.to_json())["backend"] == "remote"

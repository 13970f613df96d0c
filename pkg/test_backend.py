from unittest.mock import MagicMock, patch

import pytest
import requests

from memory.backend import ChatMessage, MockBackend, SilentMockBackend, to_chat_messages
from memory.errors import BackendError
from memory.orchestrator import PromptAssembly, PromptSegment
from memory.remote_backend import RemoteChatBackend


def assembly_of(*segments):
    assembly = PromptAssembly("ada", "s1", 0, "recency_first", 1000)
    assembly.segments = [PromptSegment.make(role, content, source, kind) for role, content, source, kind in segments]
    return assembly


def test_to_chat_messages_preserves_order():
    assembly = assembly_of(
        ("system", "About the user: I live in Rome.", "long_term_user", "bio"),
        ("user", "hi", "conversational", "turn"),
        ("user", "what now?", "query", "query"),
    )
    messages = to_chat_messages(assembly)
    assert messages == [
        ChatMessage("system", "About the user: I live in Rome."),
        ChatMessage("user", "hi"),
        ChatMessage("user", "what now?"),
    ]
    assert sum(s.token_count for s in assembly.segments) == assembly.total_tokens
    assert to_chat_messages(assembly_of()) == []


def test_mock_template():
    backend = MockBackend()
    assert backend.generate([ChatMessage("user", "hello")]) == "Reply to: hello | known:"
    messages = [
        ChatMessage("system", "About the user: My dog is Pixel. I live in Rome."),
        ChatMessage("system", "Context: time_of_day=morning"),
        ChatMessage("system", "Upcoming: dentist at 09:00 UTC"),
        ChatMessage("system", "Working memory: goal=never echoed"),
        ChatMessage("user", "any plans?"),
    ]
    reply = backend.generate(messages, seed=3)
    assert reply == ("Reply to: any plans? | known: About the user: My dog is Pixel.; "
                     "Context: time_of_day=morning; Upcoming: dentist at 09:00 UTC")
    assert backend.generate(messages, seed=3) == reply


def test_backends_require_user_last():
    for backend in (MockBackend(), SilentMockBackend()):
        with pytest.raises(ValueError):
            backend.generate([])
        with pytest.raises(ValueError):
            backend.generate([ChatMessage("user", "hi"), ChatMessage("assistant", "hello")])
    assert SilentMockBackend().generate([ChatMessage("user", "hi")]) == "OK."


@patch('memory.remote_backend.requests.post')
def test_remote_backend_posts_messages(mock_post, monkeypatch):
    monkeypatch.setenv("CHAT_TOKEN", "abc123")
    mock_post.return_value = MagicMock(status_code=200)
    mock_post.return_value.json.return_value = {"content": "Buongiorno!"}
    backend = RemoteChatBackend("http://chat.local/v1", {"Authorization": "Bearer $CHAT_TOKEN"}, timeout_s=5)
    assert backend.generate([ChatMessage("user", "hi")], seed=9) == "Buongiorno!"
    _, kwargs = mock_post.call_args
    assert kwargs["json"] == {"messages": [{"role": "user", "content": "hi"}], "seed": 9}
    assert kwargs["headers"]["Authorization"] == "Bearer abc123"
    assert kwargs["timeout"] == 5


@patch('memory.remote_backend.requests.post')
def test_remote_backend_surfaces_retry_after(mock_post):
    mock_post.return_value = MagicMock(status_code=429, text="slow down", headers={"Retry-After": "7"})
    backend = RemoteChatBackend("http://chat.local/v1")
    with pytest.raises(BackendError) as excinfo:
        backend.generate([ChatMessage("user", "hi")])
    assert excinfo.value.status == 429
    assert excinfo.value.retry_after == 7.0


@patch('memory.remote_backend.requests.post')
def test_remote_backend_transport_and_format_errors(mock_post):
    backend = RemoteChatBackend("http://chat.local/v1")
    mock_post.side_effect = requests.Timeout("timed out")
    with pytest.raises(BackendError):
        backend.generate([ChatMessage("user", "hi")])
    mock_post.side_effect = None
    mock_post.return_value = MagicMock(status_code=200)
    mock_post.return_value.json.return_value = {"text": "wrong field"}
    with pytest.raises(BackendError):
        backend.generate([ChatMessage("user", "hi")])
    with pytest.raises(ValueError):
        RemoteChatBackend("")

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List

from memory.base import Role
from memory.text import first_sentence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def to_dict(self) -> Dict[str, str]:
        return {"role": self.role, "content": self.content}


def to_chat_messages(assembly) -> List[ChatMessage]:
    """One message per segment, in segment order."""
    return [ChatMessage(segment.role, segment.content) for segment in assembly.segments]


def check_messages(messages: List[ChatMessage]) -> None:
    if not messages:
        raise ValueError("No messages to generate from")
    if messages[-1].role != Role.USER.value:
        raise ValueError("The last message must come from the user")


class GenerationBackend(ABC):
    @abstractmethod
    def generate(self, messages: List[ChatMessage], seed: int = 0) -> str:
        pass

    def close(self):
        pass


class MockBackend(GenerationBackend):
    """Deterministic reply that echoes the first sentences of the first three system messages."""

    KNOWN_SYSTEM_MESSAGES = 3

    def generate(self, messages, seed=0):
        check_messages(messages)
        system = [m.content for m in messages if m.role == Role.SYSTEM.value][: self.KNOWN_SYSTEM_MESSAGES]
        reply = f"Reply to: {messages[-1].content} | known:"
        if system:
            reply += " " + "; ".join(first_sentence(text) for text in system)
        return reply


class SilentMockBackend(GenerationBackend):
    REPLY = "OK."

    def generate(self, messages, seed=0):
        check_messages(messages)
        return self.REPLY

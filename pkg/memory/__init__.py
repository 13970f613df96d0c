from memory.base import Message, MemorySource, Role, TokenBudget, count_tokens, validate_message
from memory.storage import RecordKey, RecordStore
from memory.crypto import EnvelopeRecord, Keyring
from memory.conversation import ConversationMemory
from memory.longterm import ForgetSelector, LongTermUserMemory
from memory.episodic import EpisodicMemory
from memory.context import ContextMemory, ContextProvider
from memory.working import WorkingMemory
from memory.policy import Policy, PolicyName, score_item
from memory.orchestrator import MemoryController, PromptAssembly
from memory.backend import ChatMessage, GenerationBackend, MockBackend, to_chat_messages
from memory.system import MemorySystem

__all__ = [
    'Message',
    'MemorySource',
    'Role',
    'TokenBudget',
    'count_tokens',
    'validate_message',
    'RecordKey',
    'RecordStore',
    'EnvelopeRecord',
    'Keyring',
    'ConversationMemory',
    'ForgetSelector',
    'LongTermUserMemory',
    'EpisodicMemory',
    'ContextMemory',
    'ContextProvider',
    'WorkingMemory',
    'Policy',
    'PolicyName',
    'score_item',
    'MemoryController',
    'PromptAssembly',
    'ChatMessage',
    'GenerationBackend',
    'MockBackend',
    'to_chat_messages',
    'MemorySystem',
]

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

from memory.backend import GenerationBackend, MockBackend, SilentMockBackend, to_chat_messages
from memory.base import Role, TokenBudget
from memory.clock import Clock, IdFactory, SystemClock, clock_from_env
from memory.context import ContextMemory, StaticProvider, WorkHoursProvider
from memory.conversation import BackendSummarizer, ConversationMemory, ExtractiveSummarizer
from memory.crypto import Keyring
from memory.episodic import EpisodicMemory
from memory.errors import ConfigError, InvalidMessage
from memory.http_provider import HttpContextProvider
from memory.longterm import ForgetSelector, LongTermUserMemory, RefreshJob
from memory.orchestrator import MemoryController, PromptAssembly
from memory.policy import Policy
from memory.remote_backend import RemoteChatBackend
from memory.storage import RecordStore
from memory.working import WorkingMemory

logger = logging.getLogger(__name__)


@dataclass
class ChatTurn:
    response: str
    assembly: PromptAssembly
    assemble_ms: float


class MemorySystem:
    """All five layers, the controller and a generation backend wired together."""

    def __init__(self, store: RecordStore, backend: Optional[GenerationBackend] = None,
                 clock: Optional[Clock] = None, ids: Optional[IdFactory] = None,
                 policy: Optional[Policy] = None, budget: Optional[TokenBudget] = None,
                 summarizer: str = "extractive", seed: int = 0):
        self.store = store
        self.clock = clock or SystemClock()
        self.ids = ids or IdFactory()
        self.backend = backend or MockBackend()
        self.seed = seed
        if summarizer == "backend":
            conversation_summarizer = BackendSummarizer(self.backend, seed)
        else:
            conversation_summarizer = ExtractiveSummarizer()
        self.conversation = ConversationMemory(store, self.clock, self.ids, conversation_summarizer,
                                               summarize=summarizer != "none")
        self.longterm = LongTermUserMemory(store, self.clock)
        self.episodic = EpisodicMemory(store, self.clock, self.ids)
        self.context = ContextMemory(self.clock)
        self.working = WorkingMemory(self.clock)
        self.controller = MemoryController(self.conversation, self.longterm, self.episodic, self.context,
                                           self.working, self.clock, policy, budget)
        self.known_users = set()

    @classmethod
    def from_config(cls, config, store: Optional[RecordStore] = None, clock: Optional[Clock] = None,
                    ids: Optional[IdFactory] = None, backend: Optional[GenerationBackend] = None,
                    seed: int = 0) -> "MemorySystem":
        try:
            clock = clock or clock_from_env(config.fake_now or "")
        except ValueError as e:
            raise ConfigError(f"Invalid fake_now: {e}")
        if store is None:
            keyring = Keyring.load_or_create(config.keyring_path)
            store = RecordStore.open(config.store_path, keyring, clock, durable=config.durable)
        backend = backend or build_backend(config)
        system = cls(store, backend, clock, ids, config.default_policy(), config.token_budget(),
                     config.summarizer, seed)
        register_providers(system.context, config.providers)
        return system

    def chat_turn(self, user_id: str, session_id: str, text: str,
                  now_ms: Optional[int] = None, policy: Optional[Policy] = None,
                  budget: Optional[TokenBudget] = None) -> ChatTurn:
        """Assemble, generate, then remember both turns."""
        now_ms = self.clock.now_ms() if now_ms is None else now_ms
        self.known_users.add(user_id)
        started = time.perf_counter()
        assembly = self.controller.assemble_prompt(user_id, session_id, text, now_ms, policy, budget)
        assemble_ms = (time.perf_counter() - started) * 1000.0
        response = self.backend.generate(to_chat_messages(assembly), self.seed)
        self.conversation.remember_turn(session_id, Role.USER, text, now_ms, user_id=user_id)
        self.conversation.remember_turn(session_id, Role.ASSISTANT, response, now_ms)
        try:
            self.episodic.log_interaction(user_id, now_ms, text=text)
        except InvalidMessage:
            logger.debug(f"No topic in turn for {user_id}, interaction not stamped")
        return ChatTurn(response, assembly, assemble_ms)

    def end_session(self, user_id: str, session_id: str) -> RefreshJob:
        """Queue a bio refresh from the session's turns and drop its scratchpad."""
        job = self.longterm.schedule_bio_refresh(user_id, self.conversation.log(session_id).messages)
        self.working.clear_session(session_id)
        return job

    def forget(self, user_id: str, selector: ForgetSelector) -> Dict:
        """Forget in long-term memory, then shred every copy the other layers hold.

        Conversation turns, scratchpad items, queued reminders, events and
        interaction stamps that contain forgotten content are removed, so no
        later prompt can carry it, even within a session that is still open.
        """
        report = self.longterm.forget(user_id, selector)
        sessions = self.conversation.user_sessions(user_id)
        if selector.kind == "all":
            turns = self.conversation.forget_user(user_id)
            episodic = self.episodic.forget_user(user_id)
            self.controller.pending.drain(user_id)
            for session_id in sessions:
                self.working.clear_session(session_id)
        else:
            turns = self.conversation.redact(user_id, report.content)
            episodic = self.episodic.forget_matching(user_id, report.content)
            self.controller.pending.scrub(user_id, report.content)
            self.working.scrub(sessions, report.content)
        return {**report.to_dict(), "conversation_records": turns, "episodic_records": episodic}

    def forget_everything(self, user_id: str) -> Dict:
        return self.forget(user_id, ForgetSelector.everything())

    def users(self) -> List[str]:
        return sorted(self.known_users)

    def close(self):
        self.longterm.close()
        self.context.close()
        self.backend.close()
        self.store.close()


def build_backend(config) -> GenerationBackend:
    if config.backend == "remote":
        return RemoteChatBackend(config.backend_url, config.backend_headers, float(config.backend_timeout_s))
    if config.backend == "silent":
        return SilentMockBackend()
    return MockBackend()


def register_providers(context: ContextMemory, providers: Dict) -> None:
    for kind, spec in sorted(providers.items()):
        ttl_ms = spec.get("ttl_ms")
        if "static" in spec:
            provider = StaticProvider(str(spec["static"]), ttl_ms)
        elif "http" in spec:
            provider = HttpContextProvider(spec["http"], spec.get("headers"), ttl_ms)
        else:
            provider = WorkHoursProvider(spec.get("start_hour", 9), spec.get("end_hour", 17))
        context.register_provider(kind, provider, ttl_ms, spec.get("timeout_ms"))
        logger.info(f"Registered {type(provider).__name__} for '{kind}'")

import logging

import pytest

from memory.clock import FakeClock, SequentialIds
from memory.crypto import Keyring
from memory.storage import RecordStore

logging.basicConfig(level=logging.DEBUG)

# Saturday 2024-01-06 18:00 UTC
SATURDAY_EVENING_MS = 1704564000000


@pytest.fixture
def clock():
    return FakeClock(SATURDAY_EVENING_MS)


@pytest.fixture
def ids():
    return SequentialIds("t")


@pytest.fixture
def keyring():
    return Keyring.ephemeral()


@pytest.fixture
def store(keyring, clock):
    store = RecordStore.in_memory(keyring, clock)
    yield store
    store.close()


@pytest.fixture
def file_store(tmp_path, keyring, clock):
    store = RecordStore.open(str(tmp_path / "store"), keyring, clock, durable=False)
    yield store
    store.close()

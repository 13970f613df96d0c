import json
import logging
import os
import struct
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from memory.clock import Clock, SystemClock
from memory.crypto import EnvelopeRecord, Keyring, open_envelope, seal
from memory.errors import RecordNotFound, StorageError
from memory.locks import LockTable

logger = logging.getLogger(__name__)

ERASE_ATTEMPTS = 3


@dataclass(frozen=True, order=True)
class RecordKey:
    namespace: str
    user_id: str
    record_id: str

    def context(self) -> bytes:
        """Bytes bound into the envelope's authenticated data."""
        return "\x1f".join((self.namespace, self.user_id, self.record_id)).encode("utf-8")

    def to_dict(self) -> Dict[str, str]:
        return {"namespace": self.namespace, "user_id": self.user_id, "record_id": self.record_id}

    def __str__(self):
        return f"{self.namespace}/{self.user_id}/{self.record_id}"


class RecordBackend(ABC):
    @abstractmethod
    def write(self, key: RecordKey, blob: bytes, shred: Optional[Tuple[int, int]] = None) -> None:
        """Store blob under key durably, replacing any previous value.

        shred is an (offset, length) span of the superseded value that is
        zeroed once the new value is durable.
        """
        pass

    @abstractmethod
    def read(self, key: RecordKey) -> bytes:
        pass

    @abstractmethod
    def patch(self, key: RecordKey, offset: int, data: bytes) -> None:
        """Overwrite bytes of the stored blob in place."""
        pass

    @abstractmethod
    def delete(self, key: RecordKey) -> None:
        pass

    @abstractmethod
    def keys(self) -> List[RecordKey]:
        pass

    @abstractmethod
    def raw_bytes(self) -> bytes:
        """Everything the backend keeps at rest, for scanning."""
        pass

    def contains(self, key: RecordKey) -> bool:
        try:
            self.read(key)
            return True
        except RecordNotFound:
            return False

    def close(self) -> None:
        pass


class MemoryBackend(RecordBackend):
    def __init__(self):
        self._blobs: Dict[RecordKey, bytearray] = {}
        self._lock = threading.RLock()

    def write(self, key, blob, shred=None):
        with self._lock:
            previous = self._blobs.get(key)
            self._blobs[key] = bytearray(blob)
            if previous is not None and shred:
                offset, length = shred
                previous[offset:offset + length] = b"\x00" * length

    def read(self, key):
        with self._lock:
            if key not in self._blobs:
                raise RecordNotFound(key)
            return bytes(self._blobs[key])

    def patch(self, key, offset, data):
        with self._lock:
            blob = self._blobs.get(key)
            if blob is not None:
                blob[offset:offset + len(data)] = data

    def delete(self, key):
        with self._lock:
            self._blobs.pop(key, None)

    def keys(self):
        with self._lock:
            return sorted(self._blobs)

    def raw_bytes(self):
        with self._lock:
            return b"".join(bytes(b) for b in self._blobs.values())


_PUT = b"P"
_ERASE = b"E"


class FileBackend(RecordBackend):
    """Single append-only log file plus an in-memory index.

    Frame: op(1) | key_len(2) | key | value_len(4) | value. A later frame for
    the same key supersedes earlier ones; an erase frame removes the key.
    """

    def __init__(self, path: str, durable: bool = True, compact_ratio: float = 0.5,
                 compact_min_bytes: int = 1 << 20):
        self.path = path
        self.durable = durable
        self.compact_ratio = compact_ratio
        self.compact_min_bytes = compact_min_bytes
        self._index: Dict[RecordKey, Tuple[int, int]] = {}
        self._dead_bytes = 0
        self._lock = threading.RLock()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._load()
        self._fh = open(self.path, "r+b" if os.path.exists(self.path) else "w+b")

    @staticmethod
    def _encode_key(key: RecordKey) -> bytes:
        return json.dumps([key.namespace, key.user_id, key.record_id]).encode("utf-8")

    def _load(self):
        if not os.path.exists(self.path):
            return
        size = os.path.getsize(self.path)
        good = 0
        with open(self.path, "rb") as f:
            data = f.read()
        pos = 0
        while pos < size:
            try:
                op = data[pos:pos + 1]
                (klen,) = struct.unpack_from(">H", data, pos + 1)
                key_raw = data[pos + 3:pos + 3 + klen]
                (vlen,) = struct.unpack_from(">I", data, pos + 3 + klen)
                value_at = pos + 7 + klen
                if value_at + vlen > size or op not in (_PUT, _ERASE):
                    raise ValueError("truncated frame")
                key = RecordKey(*json.loads(key_raw.decode("utf-8")))
            except (struct.error, ValueError) as e:
                logger.warning(f"Ignoring damaged tail of {self.path} at byte {pos}: {e}")
                break
            previous = self._index.pop(key, None)
            if previous:
                self._dead_bytes += previous[1]
            if op == _PUT:
                self._index[key] = (value_at, vlen)
            pos = value_at + vlen
            good = pos
        if good < size:
            with open(self.path, "r+b") as f:
                f.truncate(good)

    def _append(self, op: bytes, key: RecordKey, value: bytes) -> int:
        key_raw = self._encode_key(key)
        frame = op + struct.pack(">H", len(key_raw)) + key_raw + struct.pack(">I", len(value)) + value
        self._fh.seek(0, os.SEEK_END)
        start = self._fh.tell()
        self._fh.write(frame)
        self._sync()
        return start + 7 + len(key_raw)

    def _sync(self):
        self._fh.flush()
        if self.durable:
            os.fsync(self._fh.fileno())

    def write(self, key, blob, shred=None):
        with self._lock:
            try:
                value_at = self._append(_PUT, key, blob)
            except OSError as e:
                raise StorageError(f"Write of {key} failed: {e}")
            previous = self._index.get(key)
            if previous:
                self._dead_bytes += previous[1]
                if shred:
                    self._patch_at(previous[0] + shred[0], b"\x00" * shred[1])
            self._index[key] = (value_at, len(blob))
            self._maybe_compact()

    def read(self, key):
        with self._lock:
            location = self._index.get(key)
            if location is None:
                raise RecordNotFound(key)
            offset, length = location
            self._fh.seek(offset)
            return self._fh.read(length)

    def patch(self, key, offset, data):
        with self._lock:
            location = self._index.get(key)
            if location is None:
                return
            self._patch_at(location[0] + offset, data)

    def _patch_at(self, position: int, data: bytes):
        try:
            self._fh.seek(position)
            self._fh.write(data)
            self._sync()
        except OSError as e:
            raise StorageError(f"In-place overwrite at {position} failed: {e}")

    def delete(self, key):
        with self._lock:
            location = self._index.get(key)
            if location is None:
                return
            try:
                self._append(_ERASE, key, b"")
            except OSError as e:
                raise StorageError(f"Erase of {key} failed: {e}")
            del self._index[key]
            self._dead_bytes += location[1]
            self._maybe_compact()

    def keys(self):
        with self._lock:
            return sorted(self._index)

    def raw_bytes(self):
        with self._lock:
            self._fh.flush()
            with open(self.path, "rb") as f:
                return f.read()

    def _maybe_compact(self):
        if self._dead_bytes < self.compact_min_bytes:
            return
        live = sum(length for _, length in self._index.values())
        if self._dead_bytes >= (live + self._dead_bytes) * self.compact_ratio:
            self.compact()

    def compact(self):
        """Rewrite only live records; superseded frames disappear from disk."""
        with self._lock:
            tmp_path = self.path + ".compact"
            new_index = {}
            with open(tmp_path, "wb") as out:
                for key in sorted(self._index):
                    offset, length = self._index[key]
                    self._fh.seek(offset)
                    value = self._fh.read(length)
                    key_raw = self._encode_key(key)
                    out.write(_PUT + struct.pack(">H", len(key_raw)) + key_raw + struct.pack(">I", length))
                    new_index[key] = (out.tell(), length)
                    out.write(value)
                out.flush()
                os.fsync(out.fileno())
            self._fh.close()
            os.replace(tmp_path, self.path)
            self._fh = open(self.path, "r+b")
            self._index = new_index
            logger.info(f"Compacted {self.path}: dropped {self._dead_bytes} dead bytes")
            self._dead_bytes = 0

    def close(self):
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


class AuditLog:
    """Append-only, metadata-only record of store and memory actions.

    The store writes exactly one entry per put_record, get_record and
    erase_record call, once the backend has been asked, whatever the
    outcome: a read of a missing key, a failed write and an erase of
    nothing are all recorded. Decryption never happens before the entry
    is written, so a read that fails authentication still leaves a trace.
    """

    def __init__(self, path: Optional[str] = None, clock: Optional[Clock] = None):
        self.path = path
        self.clock = clock or SystemClock()
        self._entries: List[Dict] = []
        self._last_ts = 0
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            with open(path) as f:
                for line in f:
                    if line.strip():
                        entry = json.loads(line)
                        self._entries.append(entry)
                        self._last_ts = max(self._last_ts, entry["ts_ms"])

    def append(self, action: str, namespace: str, user_id: str, record_id: str = "") -> Dict:
        with self._lock:
            self._last_ts = max(self._last_ts, self.clock.now_ms())
            entry = {
                "ts_ms": self._last_ts,
                "action": action,
                "namespace": namespace,
                "user_id": user_id,
                "record_id": record_id,
            }
            self._entries.append(entry)
            if self.path:
                with open(self.path, "a") as f:
                    f.write(json.dumps(entry, sort_keys=True) + "\n")
            return entry

    def entries(self, user_id: Optional[str] = None) -> List[Dict]:
        with self._lock:
            return [dict(e) for e in self._entries if user_id is None or e["user_id"] == user_id]


class RecordStore:
    """Encrypted record store: put/get/erase over a pluggable backend."""

    def __init__(self, backend: RecordBackend, keyring: Keyring,
                 audit: Optional[AuditLog] = None, clock: Optional[Clock] = None):
        self.backend = backend
        self.keyring = keyring
        self.clock = clock or SystemClock()
        self.audit = audit or AuditLog(clock=self.clock)
        self._key_locks = LockTable()

    @classmethod
    def open(cls, store_path: str, keyring: Keyring, clock: Optional[Clock] = None,
             durable: bool = True) -> "RecordStore":
        os.makedirs(store_path, exist_ok=True)
        clock = clock or SystemClock()
        backend = FileBackend(os.path.join(store_path, "records.log"), durable=durable)
        audit = AuditLog(os.path.join(store_path, "audit.jsonl"), clock=clock)
        logger.info(f"Opened record store at {store_path}")
        return cls(backend, keyring, audit, clock)

    @classmethod
    def in_memory(cls, keyring: Optional[Keyring] = None, clock: Optional[Clock] = None) -> "RecordStore":
        return cls(MemoryBackend(), keyring or Keyring.ephemeral(), clock=clock)

    def _lock_for(self, key: RecordKey):
        return self._key_locks.hold(key)

    def _audit(self, action: str, key: RecordKey) -> None:
        self.audit.append(action, key.namespace, key.user_id, key.record_id)

    def put_record(self, key: RecordKey, plaintext: bytes, kek_id: Optional[str] = None) -> EnvelopeRecord:
        envelope = seal(plaintext, self.keyring, key.context(), self.clock.now_ms(), kek_id)
        blob = envelope.encode()
        try:
            with self._lock_for(key):
                previous = self._read_blob(key)
                # superseded versions must not stay decryptable on disk
                shred = self._dek_span(previous) if previous is not None else None
                self.backend.write(key, blob, shred=shred)
        finally:
            self._audit("put", key)
        return envelope

    def get_record(self, key: RecordKey) -> bytes:
        try:
            blob = self.backend.read(key)
        finally:
            self._audit("get", key)
        return open_envelope(EnvelopeRecord.decode(blob), self.keyring, key.context())

    def erase_record(self, key: RecordKey) -> bool:
        """Crypto-shred then remove. Returns False when there was nothing to erase."""
        try:
            with self._lock_for(key):
                for attempt in range(1, ERASE_ATTEMPTS + 1):
                    try:
                        blob = self._read_blob(key)
                        if blob is None:
                            return False
                        span = self._dek_span(blob)
                        if span:
                            self.backend.patch(key, span[0], b"\x00" * span[1])
                        self.backend.delete(key)
                        return True
                    except (StorageError, OSError) as e:
                        logger.error(f"Erase of {key} failed (attempt {attempt}): {str(e)}")
                        if attempt == ERASE_ATTEMPTS:
                            raise StorageError(f"Could not erase {key}: {e}")
                        time.sleep(0.05 * attempt)
        finally:
            self._audit("erase", key)

    def lock_count(self) -> int:
        """Per-key locks currently alive; zero when the store is idle."""
        return len(self._key_locks)

    def _read_blob(self, key: RecordKey) -> Optional[bytes]:
        try:
            return self.backend.read(key)
        except RecordNotFound:
            return None

    @staticmethod
    def _dek_span(blob: bytes) -> Optional[Tuple[int, int]]:
        try:
            return EnvelopeRecord.wrapped_dek_span(blob)
        except (IndexError, ValueError, struct.error):
            return None

    def list_keys(self, namespace: str, user_id: Optional[str] = None) -> List[RecordKey]:
        return [k for k in self.backend.keys()
                if k.namespace == namespace and (user_id is None or k.user_id == user_id)]

    def raw_bytes(self) -> bytes:
        return self.backend.raw_bytes()

    def close(self):
        self.backend.close()

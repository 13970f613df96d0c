"""Envelope encryption for durable memory records.

Plaintext is DEFLATE-compressed, then sealed with AES-256-GCM under a fresh
per-record data key (DEK). The DEK is wrapped (RFC 3394) under a
key-encryption key (KEK) from the keyring. Binary layout, big-endian:

    magic(4) | version(1) | kek_id_len(1) | kek_id | dek_len(2) | wrapped_dek
    | nonce(12) | ct_len(4) | ciphertext | created_ms(8)
"""
import base64
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.keywrap import InvalidUnwrap, aes_key_unwrap, aes_key_wrap

from memory.errors import (
    AuthenticationError,
    ConfigError,
    DecompressionError,
    EnvelopeFormatError,
    UnknownKekError,
)

logger = logging.getLogger(__name__)

MAGIC = b"MMAG"
VERSION = 1
NONCE_BYTES = 12
KEY_BYTES = 32
COMPRESSION_LEVEL = 6


class Keyring:
    """Key-encryption keys by id, plus the id used for new records."""

    def __init__(self, keys: Dict[str, bytes], active: Optional[str] = None):
        if not keys:
            raise ConfigError("Keyring holds no keys")
        for kek_id, key in keys.items():
            if len(key) != KEY_BYTES:
                raise ConfigError(f"KEK '{kek_id}' must be {KEY_BYTES} bytes")
            if not 0 < len(kek_id.encode("utf-8")) < 256:
                raise ConfigError(f"KEK id '{kek_id}' must be 1-255 bytes")
        self._keys = dict(keys)
        self.active = active or sorted(keys)[0]
        if self.active not in self._keys:
            raise ConfigError(f"Active KEK '{self.active}' is not in the keyring")

    @classmethod
    def ephemeral(cls, kek_id: str = "kek-1") -> "Keyring":
        return cls({kek_id: AESGCM.generate_key(bit_length=256)}, kek_id)

    @classmethod
    def load(cls, path: str) -> "Keyring":
        try:
            with open(path) as f:
                data = json.load(f)
            keys = {kek_id: base64.b64decode(value) for kek_id, value in data["keys"].items()}
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"Cannot read keyring {path}: {e}")
        return cls(keys, data.get("active"))

    @classmethod
    def load_or_create(cls, path: str) -> "Keyring":
        if os.path.exists(path):
            return cls.load(path)
        logger.warning(f"Keyring {path} not found, generating a new one")
        keyring = cls.ephemeral()
        keyring.save(path)
        return keyring

    def save(self, path: str) -> None:
        data = {
            "active": self.active,
            "keys": {k: base64.b64encode(v).decode("ascii") for k, v in sorted(self._keys.items())},
        }
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as f:
            json.dump(data, f, indent=2)

    def add(self, kek_id: str, key: bytes, activate: bool = False) -> None:
        """New keys only affect records written after activation."""
        self._keys[kek_id] = key
        if activate:
            self.active = kek_id

    def get(self, kek_id: str) -> bytes:
        try:
            return self._keys[kek_id]
        except KeyError:
            raise UnknownKekError(kek_id)

    def ids(self):
        return sorted(self._keys)


@dataclass(frozen=True)
class EnvelopeRecord:
    kek_id: str
    wrapped_dek: bytes
    nonce: bytes
    ciphertext: bytes
    created_ms: int
    version: int = VERSION

    def encode(self) -> bytes:
        kek = self.kek_id.encode("utf-8")
        return b"".join([
            MAGIC,
            struct.pack(">BB", self.version, len(kek)),
            kek,
            struct.pack(">H", len(self.wrapped_dek)),
            self.wrapped_dek,
            self.nonce,
            struct.pack(">I", len(self.ciphertext)),
            self.ciphertext,
            struct.pack(">Q", self.created_ms),
        ])

    @classmethod
    def decode(cls, blob: bytes) -> "EnvelopeRecord":
        try:
            if blob[:4] != MAGIC:
                raise EnvelopeFormatError("Bad envelope magic")
            version, kek_len = struct.unpack_from(">BB", blob, 4)
            if version != VERSION:
                raise EnvelopeFormatError(f"Unsupported envelope version {version}")
            pos = 6
            kek_id = blob[pos:pos + kek_len].decode("utf-8")
            pos += kek_len
            (dek_len,) = struct.unpack_from(">H", blob, pos)
            pos += 2
            wrapped_dek = blob[pos:pos + dek_len]
            pos += dek_len
            nonce = blob[pos:pos + NONCE_BYTES]
            pos += NONCE_BYTES
            (ct_len,) = struct.unpack_from(">I", blob, pos)
            pos += 4
            ciphertext = blob[pos:pos + ct_len]
            pos += ct_len
            (created_ms,) = struct.unpack_from(">Q", blob, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as e:
            raise EnvelopeFormatError(f"Truncated or corrupt envelope: {e}")
        if pos != len(blob) or len(wrapped_dek) != dek_len or len(nonce) != NONCE_BYTES \
                or len(ciphertext) != ct_len:
            raise EnvelopeFormatError("Envelope length fields do not match its size")
        return cls(kek_id, wrapped_dek, nonce, ciphertext, created_ms, version)

    @staticmethod
    def wrapped_dek_span(blob: bytes) -> Tuple[int, int]:
        """(offset, length) of the wrapped data key inside an encoded envelope."""
        kek_len = blob[5]
        offset = 6 + kek_len
        (dek_len,) = struct.unpack_from(">H", blob, offset)
        return offset + 2, dek_len


def _aad(kek_id: str, context: bytes) -> bytes:
    return MAGIC + bytes([VERSION]) + kek_id.encode("utf-8") + b"|" + context


def seal(plaintext: bytes, keyring: Keyring, context: bytes, created_ms: int,
         kek_id: Optional[str] = None) -> EnvelopeRecord:
    kek_id = kek_id or keyring.active
    kek = keyring.get(kek_id)
    dek = AESGCM.generate_key(bit_length=256)
    nonce = os.urandom(NONCE_BYTES)
    compressed = zlib.compress(plaintext, COMPRESSION_LEVEL)
    ciphertext = AESGCM(dek).encrypt(nonce, compressed, _aad(kek_id, context))
    return EnvelopeRecord(kek_id, aes_key_wrap(kek, dek), nonce, ciphertext, int(created_ms))


def open_envelope(envelope: EnvelopeRecord, keyring: Keyring, context: bytes) -> bytes:
    kek = keyring.get(envelope.kek_id)
    try:
        dek = aes_key_unwrap(kek, envelope.wrapped_dek)
    except (InvalidUnwrap, ValueError) as e:
        raise AuthenticationError(f"Wrapped data key failed to unwrap: {e}")
    if len(dek) != KEY_BYTES:
        raise AuthenticationError("Unwrapped data key has the wrong size")
    try:
        compressed = AESGCM(dek).decrypt(envelope.nonce, envelope.ciphertext,
                                         _aad(envelope.kek_id, context))
    except InvalidTag:
        raise AuthenticationError("Envelope failed authentication")
    try:
        return zlib.decompress(compressed)
    except zlib.error as e:
        raise DecompressionError(f"Envelope payload failed to decompress: {e}")

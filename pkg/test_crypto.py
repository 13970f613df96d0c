import os
import random

import pytest

from memory.crypto import EnvelopeRecord, Keyring, open_envelope, seal
from memory.errors import AuthenticationError, ConfigError, EnvelopeError, EnvelopeFormatError, UnknownKekError

CONTEXT = b"bio\x1fada\x1fprofile"


def test_seal_open_roundtrip(keyring):
    rng = random.Random(11)
    for size in [0, 1, 1024, 10_000, 1 << 20]:
        plaintext = bytes(rng.getrandbits(8) for _ in range(min(size, 4096))) * (size // 4096 + 1)
        plaintext = plaintext[:size]
        envelope = seal(plaintext, keyring, CONTEXT, 5)
        decoded = EnvelopeRecord.decode(envelope.encode())
        assert decoded == envelope
        assert open_envelope(decoded, keyring, CONTEXT) == plaintext


def test_repetitive_plaintext_compresses_before_encryption(keyring):
    envelope = seal(b"a" * 4096, keyring, CONTEXT, 0)
    assert len(envelope.ciphertext) < 1024


def test_identical_plaintexts_get_fresh_keys_and_nonces(keyring):
    first = seal(b"same text", keyring, CONTEXT, 0)
    second = seal(b"same text", keyring, CONTEXT, 0)
    assert first.nonce != second.nonce
    assert first.ciphertext != second.ciphertext
    assert first.wrapped_dek != second.wrapped_dek


def test_any_flipped_bit_fails(keyring):
    blob = seal(b"I live in Rome. " * 8, keyring, CONTEXT, 42).encode()
    created_at = len(blob) - 8
    rng = random.Random(5)
    positions = rng.sample(range(created_at * 8), 300)
    for bit in positions:
        damaged = bytearray(blob)
        damaged[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(EnvelopeError):
            open_envelope(EnvelopeRecord.decode(bytes(damaged)), keyring, CONTEXT)


def test_created_ms_is_not_authenticated(keyring):
    blob = bytearray(seal(b"payload", keyring, CONTEXT, 42).encode())
    blob[-1] ^= 1
    assert open_envelope(EnvelopeRecord.decode(bytes(blob)), keyring, CONTEXT) == b"payload"


def test_wrong_context_or_kek_fails(keyring):
    envelope = seal(b"payload", keyring, CONTEXT, 0)
    with pytest.raises(AuthenticationError):
        open_envelope(envelope, keyring, b"bio\x1fbob\x1fprofile")
    with pytest.raises(AuthenticationError):
        open_envelope(envelope, Keyring.ephemeral(), CONTEXT)
    with pytest.raises(UnknownKekError):
        open_envelope(envelope, Keyring.ephemeral("other"), CONTEXT)


def test_truncated_envelope_is_format_error(keyring):
    blob = seal(b"payload", keyring, CONTEXT, 0).encode()
    with pytest.raises(EnvelopeFormatError):
        EnvelopeRecord.decode(blob[:-3])
    with pytest.raises(EnvelopeFormatError):
        EnvelopeRecord.decode(b"XXXX" + blob[4:])


def test_wrapped_dek_span_points_at_key(keyring):
    envelope = seal(b"payload", keyring, CONTEXT, 0)
    blob = envelope.encode()
    offset, length = EnvelopeRecord.wrapped_dek_span(blob)
    assert blob[offset:offset + length] == envelope.wrapped_dek


def test_rotated_keyring_opens_old_records(keyring):
    old = seal(b"before rotation", keyring, CONTEXT, 0)
    keyring.add("kek-2", os.urandom(32), activate=True)
    new = seal(b"after rotation", keyring, CONTEXT, 0)
    assert new.kek_id == "kek-2"
    assert open_envelope(old, keyring, CONTEXT) == b"before rotation"


def test_keyring_save_and_load(tmp_path):
    path = str(tmp_path / "keys" / "keyring.json")
    created = Keyring.load_or_create(path)
    assert os.stat(path).st_mode & 0o777 == 0o600
    loaded = Keyring.load(path)
    assert loaded.active == created.active
    assert loaded.get(created.active) == created.get(created.active)
    with pytest.raises(ConfigError):
        Keyring({"k": b"short"})


def test_random_roundtrip_and_single_bit_flip_suite(keyring):
    rng = random.Random(2024)
    text = b"I live in Rome and walk my dog Pixel every morning. "
    for case in range(10_000):
        size = rng.randint(4097, 1 << 20) if case % 200 < 2 else rng.randint(0, 4096)
        if case % 2:
            plaintext = rng.getrandbits(8 * size).to_bytes(size, "little") if size else b""
        else:
            plaintext = (text * (size // len(text) + 1))[:size]
        blob = seal(plaintext, keyring, CONTEXT, case).encode()
        assert open_envelope(EnvelopeRecord.decode(blob), keyring, CONTEXT) == plaintext

        # the trailing 8 bytes hold created_ms
        bit = rng.randrange((len(blob) - 8) * 8)
        damaged = bytearray(blob)
        damaged[bit // 8] ^= 1 << (bit % 8)
        try:
            opened = open_envelope(EnvelopeRecord.decode(bytes(damaged)), keyring, CONTEXT)
        except EnvelopeError:
            continue
        assert opened == plaintext, f"case {case}: flipping bit {bit} changed the plaintext"

"""Hashing, symmetric encryption, signatures, sealing and the payment lock."""

from __future__ import annotations

import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datamarket import crypto
from datamarket.crypto import AuthenticationFailure, SignatureInvalid

from oracles import keccak256

keys32 = st.binary(min_size=32, max_size=32)


class TestHash:
    def test_empty_input_matches_reference_digest(self) -> None:
        """Known Keccak-256 of the empty string, from both implementations."""
        expected = "c5d2460186f7233c927e7db2dcc703c0e500b653ca82273b7bfad8045d85a470"
        assert crypto.hash(b"").hex() == expected
        assert keccak256(b"").hex() == expected

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=400))
    def test_agrees_with_pure_python_sponge(self, data: bytes) -> None:
        assert crypto.hash(data) == keccak256(data)

    def test_deterministic(self) -> None:
        assert crypto.hash(b"wibble") == crypto.hash(b"wibble")

    def test_trailing_zero_changes_digest(self, rng: random.Random) -> None:
        for _ in range(1000):
            x = rng.randbytes(rng.randrange(64))
            assert crypto.hash(x) != crypto.hash(x + b"\x00")

    def test_digest_is_32_bytes(self) -> None:
        assert len(crypto.hash(b"x" * 1000)) == crypto.HASH_SIZE


class TestLock:
    def test_preimage_layout(self) -> None:
        """Lock is H(be32(id) || key), recomputed with the independent sponge."""
        m0 = bytes(range(32))
        assert crypto.make_lock(5, m0).digest == keccak256(b"\x00\x00\x00\x05" + m0)

    def test_round_trip(self, rng: random.Random) -> None:
        m = crypto.new_sym_key(rng)
        assert crypto.verify_lock(crypto.make_lock(1, m), 1, m)

    def test_wrong_notary_id(self, rng: random.Random) -> None:
        m = crypto.new_sym_key(rng)
        assert not crypto.verify_lock(crypto.make_lock(1, m), 2, m)

    def test_zero_key_rejected(self, rng: random.Random) -> None:
        m = crypto.new_sym_key(rng)
        assert not crypto.verify_lock(crypto.make_lock(1, m), 1, bytes(32))

    def test_out_of_range_id_is_false(self) -> None:
        assert not crypto.verify_lock(crypto.make_lock(0, bytes(32)), 2**32, bytes(32))

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 2**32 - 1), keys32, keys32)
    def test_verify_and_forge(self, notary_id: int, m: bytes, other: bytes) -> None:
        lock = crypto.make_lock(notary_id, m)
        assert crypto.verify_lock(lock, notary_id, m)
        if other != m:
            assert not crypto.verify_lock(lock, notary_id, other)
        assert lock.digest == keccak256(struct.pack(">I", notary_id) + m)


class TestSymmetric:
    def test_round_trip(self, rng: random.Random) -> None:
        k = crypto.new_sym_key(rng)
        assert crypto.sym_decrypt(k, crypto.sym_encrypt(k, b"browsing history", rng)) == b"browsing history"

    def test_wrong_key(self, rng: random.Random) -> None:
        k, k2 = crypto.new_sym_key(rng), crypto.new_sym_key(rng)
        ct = crypto.sym_encrypt(k, b"data", rng)
        with pytest.raises(AuthenticationFailure):
            crypto.sym_decrypt(k2, ct)

    def test_truncated_body(self, rng: random.Random) -> None:
        k = crypto.new_sym_key(rng)
        ct = crypto.sym_encrypt(k, b"some plaintext", rng)
        with pytest.raises(AuthenticationFailure):
            crypto.sym_decrypt(k, crypto.Ciphertext(ct.nonce, ct.body[:-1], ct.tag))

    def test_every_single_bit_flip_fails(self, rng: random.Random) -> None:
        """Exhaustive single-bit tamper over a 64-byte message's body and tag."""
        k = crypto.new_sym_key(rng)
        ct = crypto.sym_encrypt(k, rng.randbytes(64), rng)
        raw = bytearray(ct.body + ct.tag)
        for bit in range(len(raw) * 8):
            raw[bit // 8] ^= 1 << (bit % 8)
            tampered = crypto.Ciphertext(ct.nonce, bytes(raw[:64]), bytes(raw[64:]))
            with pytest.raises(AuthenticationFailure):
                crypto.sym_decrypt(k, tampered)
            raw[bit // 8] ^= 1 << (bit % 8)

    def test_nonce_comes_from_rng(self) -> None:
        k = bytes(32)
        a = crypto.sym_encrypt(k, b"x", random.Random(3))
        b = crypto.sym_encrypt(k, b"x", random.Random(3))
        assert a == b

    def test_bytes_round_trip(self, rng: random.Random) -> None:
        ct = crypto.sym_encrypt(bytes(32), b"abc", rng)
        assert crypto.Ciphertext.from_bytes(ct.to_bytes()) == ct

    @settings(max_examples=100, deadline=None)
    @given(keys32, st.binary(max_size=300), st.integers(0, 2**32))
    def test_round_trip_property(self, k: bytes, data: bytes, seed: int) -> None:
        rng = random.Random(seed)
        assert crypto.sym_decrypt(k, crypto.sym_encrypt(k, data, rng)) == data


@pytest.fixture(params=sorted(crypto.CURVES))
def curve(request: pytest.FixtureRequest):
    with crypto.use_curve(request.param) as name:
        yield name


class TestSignatures:
    def test_sign_verify(self, curve: str, rng: random.Random) -> None:
        kp = crypto.SigningKeyPair.generate(rng)
        sig = crypto.sign(kp.secret, b"m")
        assert len(sig) == crypto.SIG_SIZE
        assert crypto.verify(kp.public, b"m", sig)

    def test_appended_byte_fails(self, curve: str, rng: random.Random) -> None:
        kp = crypto.SigningKeyPair.generate(rng)
        assert not crypto.verify(kp.public, b"m\x01", crypto.sign(kp.secret, b"m"))

    def test_other_key_fails(self, curve: str, rng: random.Random) -> None:
        k1, k2 = crypto.SigningKeyPair.generate(rng), crypto.SigningKeyPair.generate(rng)
        assert not crypto.verify(k2.public, b"m", crypto.sign(k1.secret, b"m"))

    def test_deterministic_signatures(self, curve: str) -> None:
        kp = crypto.SigningKeyPair.from_scalar(12345)
        assert crypto.sign(kp.secret, b"x") == crypto.sign(kp.secret, b"x")

    def test_garbage_public_key(self, curve: str, rng: random.Random) -> None:
        kp = crypto.SigningKeyPair.generate(rng)
        assert not crypto.verify(b"\x02" + b"\xff" * 32, b"m", crypto.sign(kp.secret, b"m"))

    def test_key_layout_and_address(self, curve: str) -> None:
        kp = crypto.SigningKeyPair.from_scalar(7)
        assert len(kp.public) == crypto.PUBKEY_SIZE and kp.public[0] in (2, 3)
        assert kp.address == keccak256(kp.public)[-20:]

    def test_addresses_injective_over_corpus(self, curve: str) -> None:
        rng = random.Random(11)
        addrs = {crypto.SigningKeyPair.generate(rng).address for _ in range(300)}
        assert len(addrs) == 300

    def test_curves_give_different_keys(self) -> None:
        with crypto.use_curve("secp256k1"):
            k1 = crypto.SigningKeyPair.from_scalar(9).public
        with crypto.use_curve("secp256r1"):
            r1 = crypto.SigningKeyPair.from_scalar(9).public
        assert k1 != r1

    def test_use_curve_restores(self) -> None:
        before = crypto.curve_name
        with crypto.use_curve("secp256k1"):
            assert crypto.curve_name == "secp256k1"
        assert crypto.curve_name == before

    def test_unknown_curve(self) -> None:
        with pytest.raises(ValueError):
            with crypto.use_curve("ed25519"):
                pass


class TestEnvelope:
    def test_encoding_layout(self, rng: random.Random) -> None:
        kp = crypto.SigningKeyPair.generate(rng)
        env = crypto.make_envelope(kp, b"hello")
        raw = env.encode()
        assert raw[:4] == b"\x00\x00\x00\x05"
        assert raw[4:9] == b"hello"
        assert raw[9:73] == env.signature
        assert raw[73:] == kp.public
        assert crypto.Envelope.decode(raw) == env

    def test_seal_open_round_trip(self, curve: str, rng: random.Random) -> None:
        s, r = crypto.SigningKeyPair.generate(rng), crypto.SigningKeyPair.generate(rng)
        sealed = crypto.seal_message(s, r.public, b"payload", rng)
        assert crypto.open_message(r, sealed) == (b"payload", s.public)

    def test_wrong_recipient(self, curve: str, rng: random.Random) -> None:
        s, r, eve = (crypto.SigningKeyPair.generate(rng) for _ in range(3))
        sealed = crypto.seal_message(s, r.public, b"payload", rng)
        with pytest.raises(AuthenticationFailure):
            crypto.open_message(eve, sealed)

    def test_corrupted_signature(self, rng: random.Random) -> None:
        s, r = crypto.SigningKeyPair.generate(rng), crypto.SigningKeyPair.generate(rng)
        env = crypto.make_envelope(s, b"payload")
        bad = crypto.Envelope(env.payload, bytes([env.signature[0] ^ 1]) + env.signature[1:], env.sender_pk)
        sealed = crypto.seal_envelope(bad, r.public, rng)
        with pytest.raises(SignatureInvalid):
            crypto.open_message(r, sealed)

    def test_substituted_sender_key(self, rng: random.Random) -> None:
        s, r, mallory = (crypto.SigningKeyPair.generate(rng) for _ in range(3))
        env = crypto.make_envelope(s, b"payload")
        forged = crypto.Envelope(env.payload, env.signature, mallory.public)
        with pytest.raises(SignatureInvalid):
            crypto.open_message(r, crypto.seal_envelope(forged, r.public, rng))

    def test_truncated_envelope(self) -> None:
        with pytest.raises(SignatureInvalid):
            crypto.Envelope.decode(b"\x00\x00\x00\x09abc")

    @settings(max_examples=40, deadline=None)
    @given(st.binary(max_size=200), st.integers(0, 2**32))
    def test_seal_open_identity(self, payload: bytes, seed: int) -> None:
        rng = random.Random(seed)
        s, r = crypto.SigningKeyPair.generate(rng), crypto.SigningKeyPair.generate(rng)
        sealed = crypto.seal_message(s, r.public, payload, rng)
        assert crypto.open_message(r, sealed) == (payload, s.public)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32), st.data())
    def test_any_wire_tamper_rejected(self, seed: int, data: st.DataObject) -> None:
        rng = random.Random(seed)
        s, r = crypto.SigningKeyPair.generate(rng), crypto.SigningKeyPair.generate(rng)
        sealed = bytearray(crypto.seal_message(s, r.public, b"exact payload", rng))
        i = data.draw(st.integers(0, len(sealed) - 1))
        sealed[i] ^= 1 << data.draw(st.integers(0, 7))
        with pytest.raises(crypto.CryptoError):
            crypto.open_message(r, bytes(sealed))

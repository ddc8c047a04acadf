"""Hashing, authenticated encryption, signatures and the payment lock.

Keys live on a 256-bit short-Weierstrass curve: P-256 by default, or
secp256k1 via :func:`use_curve`. Both give 33-byte compressed keys and
64-byte ``r || s`` signatures. OpenSSL's P-256 code is roughly thirty
times faster, which matters once a thousand sellers each seal two
messages. Signatures are deterministic ECDSA over a Keccak-256 prehash, so
a seeded run produces identical bytes every time. All
randomness (symmetric keys, nonces, ephemeral sealing keys) is drawn from a
caller-supplied ``random.Random``.
"""

from __future__ import annotations

import contextlib
import random
import struct
from dataclasses import dataclass
from typing import Iterator

from Crypto.Hash import keccak
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, utils
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

__all__ = [
    "AuthenticationFailure",
    "Ciphertext",
    "CryptoError",
    "Envelope",
    "Lock",
    "SignatureInvalid",
    "SigningKeyPair",
    "address_of",
    "hash",
    "make_lock",
    "new_sym_key",
    "open_message",
    "make_envelope",
    "seal_envelope",
    "seal_message",
    "sign",
    "sym_decrypt",
    "sym_encrypt",
    "use_curve",
    "verify",
    "verify_lock",
]

HASH_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SIG_SIZE = 64
PUBKEY_SIZE = 33
ADDRESS_SIZE = 20

CURVES: dict[str, tuple[ec.EllipticCurve, int]] = {
    "secp256r1": (ec.SECP256R1(), 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551),
    "secp256k1": (ec.SECP256K1(), 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141),
}
DEFAULT_CURVE = "secp256r1"
_CURVE, _CURVE_ORDER = CURVES[DEFAULT_CURVE]
curve_name = DEFAULT_CURVE
_ECDSA = ec.ECDSA(utils.Prehashed(hashes.SHA256()), deterministic_signing=True)
_SEAL_INFO = b"datamarket/seal/v1"


class CryptoError(Exception):
    pass


class AuthenticationFailure(CryptoError):
    """Decryption failed: wrong key or tampered ciphertext."""


class SignatureInvalid(CryptoError):
    """A signature did not verify against the claimed sender key."""


def hash(data: bytes) -> bytes:  # noqa: A001 - the protocol's H(.)
    """Keccak-256 digest (the pre-standard padding Ethereum uses)."""
    h = keccak.new(digest_bits=256)
    h.update(bytes(data))
    return h.digest()


# ---------------------------------------------------------------------------
# symmetric


def new_sym_key(rng: random.Random) -> bytes:
    return rng.randbytes(KEY_SIZE)


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> Ciphertext:
        if len(raw) < NONCE_SIZE + TAG_SIZE:
            raise AuthenticationFailure("ciphertext too short")
        return cls(raw[:NONCE_SIZE], raw[NONCE_SIZE:-TAG_SIZE], raw[-TAG_SIZE:])


def sym_encrypt(key: bytes, plaintext: bytes, rng: random.Random) -> Ciphertext:
    if len(key) != KEY_SIZE:
        raise ValueError("symmetric keys are 32 bytes")
    nonce = rng.randbytes(NONCE_SIZE)
    sealed = AESGCM(key).encrypt(nonce, bytes(plaintext), None)
    return Ciphertext(nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def sym_decrypt(key: bytes, ct: Ciphertext) -> bytes:
    if len(key) != KEY_SIZE or len(ct.nonce) != NONCE_SIZE or len(ct.tag) != TAG_SIZE:
        raise AuthenticationFailure("malformed key or ciphertext")
    try:
        return AESGCM(key).decrypt(ct.nonce, ct.body + ct.tag, None)
    except InvalidTag:
        raise AuthenticationFailure("authentication tag mismatch") from None


# ---------------------------------------------------------------------------
# lock


@dataclass(frozen=True)
class Lock:
    digest: bytes


def _lock_preimage(notary_id: int, master_key: bytes) -> bytes:
    return struct.pack(">I", notary_id) + bytes(master_key)


def make_lock(notary_id: int, master_key: bytes) -> Lock:
    if len(master_key) != KEY_SIZE:
        raise ValueError("master key must be 32 bytes")
    return Lock(hash(_lock_preimage(notary_id, master_key)))


def verify_lock(lock: Lock, notary_id: int, master_key: bytes) -> bool:
    if not 0 <= notary_id < 2**32 or len(master_key) != KEY_SIZE:
        return False
    return hash(_lock_preimage(notary_id, master_key)) == lock.digest


# ---------------------------------------------------------------------------
# signing keys


@contextlib.contextmanager
def use_curve(name: str) -> Iterator[str]:
    """Switch the active curve for the duration of the ``with`` block."""
    global _CURVE, _CURVE_ORDER, curve_name
    if name not in CURVES:
        raise ValueError(f"unsupported curve {name!r}")
    saved = curve_name
    _CURVE, _CURVE_ORDER = CURVES[name]
    curve_name = name
    try:
        yield name
    finally:
        _CURVE, _CURVE_ORDER = CURVES[saved]
        curve_name = saved


def _encode_point(public_key: ec.EllipticCurvePublicKey) -> bytes:
    return public_key.public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )


def _decode_point(raw: bytes) -> ec.EllipticCurvePublicKey:
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, bytes(raw))
    except ValueError:
        raise SignatureInvalid("not a valid curve point") from None


def address_of(public: bytes) -> bytes:
    """Low 20 bytes of the Keccak hash of the compressed public key."""
    return hash(public)[-ADDRESS_SIZE:]


@dataclass(frozen=True)
class SigningKeyPair:
    secret: ec.EllipticCurvePrivateKey
    public: bytes
    address: bytes

    @classmethod
    def generate(cls, rng: random.Random) -> SigningKeyPair:
        scalar = rng.randrange(1, _CURVE_ORDER)
        return cls.from_scalar(scalar)

    @classmethod
    def from_scalar(cls, scalar: int) -> SigningKeyPair:
        secret = ec.derive_private_key(scalar, _CURVE)
        public = _encode_point(secret.public_key())
        return cls(secret, public, address_of(public))


def sign(sk: ec.EllipticCurvePrivateKey, msg: bytes) -> bytes:
    der = sk.sign(hash(msg), _ECDSA)
    r, s = utils.decode_dss_signature(der)
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(pk: bytes, msg: bytes, sig: bytes) -> bool:
    if len(sig) != SIG_SIZE:
        return False
    try:
        point = _decode_point(pk)
    except SignatureInvalid:
        return False
    r = int.from_bytes(sig[:32], "big")
    s = int.from_bytes(sig[32:], "big")
    if not (0 < r < _CURVE_ORDER and 0 < s < _CURVE_ORDER):
        return False
    try:
        point.verify(utils.encode_dss_signature(r, s), hash(msg), _ECDSA)
    except InvalidSignature:
        return False
    return True


# ---------------------------------------------------------------------------
# envelopes


@dataclass(frozen=True)
class Envelope:
    payload: bytes
    signature: bytes
    sender_pk: bytes

    def encode(self) -> bytes:
        return struct.pack(">I", len(self.payload)) + self.payload + self.signature + self.sender_pk

    @classmethod
    def decode(cls, raw: bytes) -> Envelope:
        if len(raw) < 4:
            raise SignatureInvalid("truncated envelope")
        (n,) = struct.unpack(">I", raw[:4])
        if len(raw) != 4 + n + SIG_SIZE + PUBKEY_SIZE:
            raise SignatureInvalid("envelope length mismatch")
        payload = raw[4 : 4 + n]
        signature = raw[4 + n : 4 + n + SIG_SIZE]
        return cls(payload, signature, raw[4 + n + SIG_SIZE :])

    def is_valid(self) -> bool:
        return verify(self.sender_pk, self.payload, self.signature)


def make_envelope(sender: SigningKeyPair, payload: bytes) -> Envelope:
    return Envelope(bytes(payload), sign(sender.secret, payload), sender.public)


def _seal_key(shared: bytes, ephemeral_pk: bytes, recipient_pk: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=ephemeral_pk + recipient_pk,
        info=_SEAL_INFO,
    ).derive(shared)


def seal_message(
    sender: SigningKeyPair, recipient_pk: bytes, payload: bytes, rng: random.Random
) -> bytes:
    """Sign ``payload`` as ``sender``, then seal the envelope to ``recipient_pk``.

    Wire layout: ephemeral compressed key (33) || nonce (12) || body || tag (16).
    """
    return seal_envelope(make_envelope(sender, payload), recipient_pk, rng)


def seal_envelope(envelope: Envelope, recipient_pk: bytes, rng: random.Random) -> bytes:
    ephemeral = SigningKeyPair.generate(rng)
    shared = ephemeral.secret.exchange(ec.ECDH(), _decode_point(recipient_pk))
    key = _seal_key(shared, ephemeral.public, recipient_pk)
    return ephemeral.public + sym_encrypt(key, envelope.encode(), rng).to_bytes()


def open_message(recipient: SigningKeyPair, sealed: bytes) -> tuple[bytes, bytes]:
    """Return ``(payload, sender_pk)``; raise if decryption or signature fails."""
    if len(sealed) < PUBKEY_SIZE + NONCE_SIZE + TAG_SIZE:
        raise AuthenticationFailure("sealed message too short")
    ephemeral_pk = sealed[:PUBKEY_SIZE]
    try:
        point = _decode_point(ephemeral_pk)
    except SignatureInvalid:
        raise AuthenticationFailure("bad ephemeral key") from None
    shared = recipient.secret.exchange(ec.ECDH(), point)
    key = _seal_key(shared, ephemeral_pk, recipient.public)
    raw = sym_decrypt(key, Ciphertext.from_bytes(sealed[PUBKEY_SIZE:]))
    envelope = Envelope.decode(raw)
    if not envelope.is_valid():
        raise SignatureInvalid("envelope signature does not verify")
    return envelope.payload, envelope.sender_pk

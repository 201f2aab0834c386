"""Software emulation of TPM 2.0 attestation capabilities.

Provides the root-of-trust primitives the rest of the system builds on: a
SHA-256 PCR bank with extend semantics, EK/AK signing identities, EK-signed
AK certificates, and nonce-bound quotes over a PCR selection.

Signatures use Ed25519 over the SHA-256 digest of a canonical byte encoding,
so every signature is deterministic and reproducible across runs (scheme tag
0x01). Verification functions are pure; a bank instance is meant to be owned
and mutated by a single agent.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

DIGEST_ALGORITHM = "sha256"
DIGEST_SIZE = 32
PCR_COUNT = 24
PCR_IMA = 10

QUOTE_VERSION = 0x01
SCHEME_ED25519 = 0x01

#: Default quote selection: the runtime-integrity register only.
DEFAULT_PCR_SELECTION = 1 << PCR_IMA

NONCE_MIN = 8
NONCE_MAX = 64


class QuoteRejected(Exception):
    """Quote failed verification; .reason is one of
    'bad-signature', 'nonce-mismatch', 'malformed'."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class Digest:
    """A 32-byte SHA-256 value with its algorithm tag."""

    value: bytes
    algorithm: str = DIGEST_ALGORITHM

    def __post_init__(self):
        if self.algorithm != DIGEST_ALGORITHM:
            raise ValueError(f"unsupported digest algorithm {self.algorithm!r}")
        if len(self.value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(self.value)}")

    @classmethod
    def of(cls, data: bytes) -> "Digest":
        return cls(hashlib.sha256(data).digest())

    @classmethod
    def zero(cls) -> "Digest":
        return cls(b"\x00" * DIGEST_SIZE)

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.value.hex()


class PcrBank:
    """24 SHA-256 registers, all-zero at creation, mutated only by extend."""

    def __init__(self):
        self._registers = [Digest.zero() for _ in range(PCR_COUNT)]

    def value(self, index: int) -> Digest:
        self._check_index(index)
        return self._registers[index]

    def extend(self, index: int, digest: Digest) -> Digest:
        """registers[index] := H(old || digest); returns the new value."""
        self._check_index(index)
        new = Digest.of(self._registers[index].value + digest.value)
        self._registers[index] = new
        return new

    def composite_digest(self, selection: int) -> Digest:
        """H(concatenation of selected register values, ascending index)."""
        _check_selection(selection)
        buf = b"".join(
            self._registers[i].value for i in range(PCR_COUNT) if selection & (1 << i)
        )
        return Digest.of(buf)

    @staticmethod
    def _check_index(index: int):
        if not 0 <= index < PCR_COUNT:
            raise ValueError(f"PCR index {index} out of range 0..{PCR_COUNT - 1}")


def _check_selection(selection: int):
    if not 0 < selection < (1 << PCR_COUNT):
        raise ValueError(f"PCR selection {selection:#x} must set at least one bit 0..23")


def _check_nonce(nonce: bytes):
    if not NONCE_MIN <= len(nonce) <= NONCE_MAX:
        raise ValueError(f"nonce length {len(nonce)} outside {NONCE_MIN}..{NONCE_MAX}")


def key_fingerprint(public_bytes: bytes) -> str:
    """Stable identity label for a raw public key."""
    return hashlib.sha256(public_bytes).hexdigest()


def _sign_digest(key: Ed25519PrivateKey, digest: bytes) -> bytes:
    assert len(digest) == DIGEST_SIZE
    return key.sign(digest)


def _verify_digest(public_bytes: bytes, digest: bytes, signature: bytes) -> bool:
    if len(digest) != DIGEST_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, digest)
        return True
    except (InvalidSignature, ValueError):
        return False


def _canonical_cert_payload(subject_public: bytes, issuer_label: str) -> bytes:
    label = issuer_label.encode()
    return (
        struct.pack(">H", len(subject_public))
        + subject_public
        + struct.pack(">H", len(label))
        + label
    )


@dataclass(frozen=True)
class EkCertificate:
    """Self-signed statement binding an EK public key to a manufacturer label."""

    ek_public: bytes
    manufacturer: str
    signature: bytes

    def verifies(self) -> bool:
        payload = _canonical_cert_payload(self.ek_public, self.manufacturer)
        return _verify_digest(self.ek_public, hashlib.sha256(payload).digest(), self.signature)


@dataclass(frozen=True)
class AkCertificate:
    """EK-signed binding of an AK public key to its issuing EK."""

    ak_public: bytes
    issuer_ek_id: str
    signature: bytes


def verify_ak_certificate(cert: AkCertificate, ek_public: bytes) -> bool:
    """True iff the certificate signature is valid under the given EK public key."""
    if cert.issuer_ek_id != key_fingerprint(ek_public):
        return False
    payload = _canonical_cert_payload(cert.ak_public, cert.issuer_ek_id)
    return _verify_digest(ek_public, hashlib.sha256(payload).digest(), cert.signature)


@dataclass(frozen=True)
class EndorsementIdentity:
    private: Ed25519PrivateKey
    public: bytes
    cert: EkCertificate

    @property
    def ek_id(self) -> str:
        return key_fingerprint(self.public)


@dataclass(frozen=True)
class AttestationIdentity:
    private: Ed25519PrivateKey
    public: bytes
    cert: AkCertificate

    @property
    def ak_id(self) -> str:
        return key_fingerprint(self.public)


def _seed_bytes(seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    return str(seed).encode()


def _derive_key(label: bytes, seed) -> Ed25519PrivateKey:
    if seed is None:
        material = os.urandom(32)
    else:
        material = hashlib.sha256(label + _seed_bytes(seed)).digest()
    return Ed25519PrivateKey.from_private_bytes(material)


def _raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def create_identity(
    seed=None, manufacturer: str = "podseal emulated TPM"
) -> tuple[EndorsementIdentity, AttestationIdentity]:
    """Provision an EK and an AK certified by it.

    With a seed the key material is derived deterministically so fixtures and
    paired test processes reproduce byte-identical public keys.
    """
    ek_key = _derive_key(b"podseal.ek.v1:", seed)
    ek_public = _raw_public(ek_key)
    ek_payload = _canonical_cert_payload(ek_public, manufacturer)
    ek_cert = EkCertificate(
        ek_public=ek_public,
        manufacturer=manufacturer,
        signature=_sign_digest(ek_key, hashlib.sha256(ek_payload).digest()),
    )

    ak_key = _derive_key(b"podseal.ak.v1:", seed)
    ak_public = _raw_public(ak_key)
    ek_id = key_fingerprint(ek_public)
    ak_payload = _canonical_cert_payload(ak_public, ek_id)
    ak_cert = AkCertificate(
        ak_public=ak_public,
        issuer_ek_id=ek_id,
        signature=_sign_digest(ek_key, hashlib.sha256(ak_payload).digest()),
    )

    ek = EndorsementIdentity(private=ek_key, public=ek_public, cert=ek_cert)
    ak = AttestationIdentity(private=ak_key, public=ak_public, cert=ak_cert)
    return ek, ak


@dataclass(frozen=True)
class Quote:
    """AK-signed statement over selected PCR values and a verifier nonce."""

    nonce: bytes
    pcr_selection: int
    composite_digest: Digest
    signature: bytes
    ak_id: str


def canonical_quote_encoding(nonce: bytes, pcr_selection: int, composite: Digest) -> bytes:
    """Bit-exact signing domain:
    version 0x01 || scheme tag || u16be nonce length || nonce ||
    u24be pcr selection || composite digest bytes."""
    return (
        bytes([QUOTE_VERSION, SCHEME_ED25519])
        + struct.pack(">H", len(nonce))
        + nonce
        + pcr_selection.to_bytes(3, "big")
        + composite.value
    )


def quote(bank: PcrBank, identity: AttestationIdentity, nonce: bytes, pcr_selection: int) -> Quote:
    """Sign the current contents of the selected registers against a fresh nonce."""
    _check_nonce(nonce)
    _check_selection(pcr_selection)
    composite = bank.composite_digest(pcr_selection)
    encoding = canonical_quote_encoding(nonce, pcr_selection, composite)
    signature = _sign_digest(identity.private, hashlib.sha256(encoding).digest())
    return Quote(
        nonce=nonce,
        pcr_selection=pcr_selection,
        composite_digest=composite,
        signature=signature,
        ak_id=identity.ak_id,
    )


def verify_quote(q: Quote, ak_public: bytes, expected_nonce: bytes) -> Digest:
    """Check a quote and return its composite digest for PCR comparison.

    Raises QuoteRejected('malformed') on structurally invalid quotes,
    QuoteRejected('bad-signature') when the signature does not verify under
    ak_public, and QuoteRejected('nonce-mismatch') when the (validly signed)
    quote answers a different challenge.
    """
    try:
        _check_nonce(q.nonce)
        _check_selection(q.pcr_selection)
    except ValueError as exc:
        raise QuoteRejected("malformed", str(exc)) from exc
    if len(q.composite_digest.value) != DIGEST_SIZE:
        raise QuoteRejected("malformed", "composite digest size")

    encoding = canonical_quote_encoding(q.nonce, q.pcr_selection, q.composite_digest)
    if not _verify_digest(ak_public, hashlib.sha256(encoding).digest(), q.signature):
        raise QuoteRejected("bad-signature")
    if q.nonce != expected_nonce:
        raise QuoteRejected("nonce-mismatch")
    return q.composite_digest

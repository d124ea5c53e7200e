"""Key material, signatures, nonces, and the mock-TEE attestation scheme.

Real SGX/SEV quote formats are out of scope; a per-node "platform key"
stands in for the CPU's attestation key so every verification path of the
protocol can be exercised. Signatures are Ed25519, channel encryption is
AES-128-GCM with the session key agreed via an ephemeral X25519 exchange.
"""

from __future__ import annotations

import enum
import hashlib
import json
import secrets
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .model import GeoPoint, NodeId

SIGNATURE_LEN = 64
PUBLIC_KEY_LEN = 32
NONCE_LEN = 16
SESSION_KEY_BITS = 128


class CryptoError(Exception):
    """Key handling or channel failure."""


class TeeKind(str, enum.Enum):
    SGX_LIKE = "sgx-like"
    SEV_LIKE = "sev-like"
    NONE = "none"


class KeyPair:
    """Ed25519 signing pair; secret bytes never leave the instance."""

    def __init__(self, private: Ed25519PrivateKey):
        self._private = private
        self.public: bytes = private.public_key().public_bytes_raw()

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        """Deterministic pair for reproducible simulations."""
        material = hashlib.sha256(b"dgate-sign" + seed).digest()
        return cls(Ed25519PrivateKey.from_private_bytes(material))

    def sign(self, payload: bytes) -> bytes:
        return self._private.sign(payload)

    def secret_fingerprint(self) -> bytes:
        """Stable secret-derived bytes for seeding verifier-side choices.

        Exposes a hash of the secret, never the secret itself.
        """
        raw = self._private.private_bytes_raw()
        return hashlib.sha256(b"dgate-secret-fp" + raw).digest()


def sign(payload: bytes, key: KeyPair) -> bytes:
    return key.sign(payload)


def verify(payload: bytes, signature: bytes, public_key: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Nonce:
    """16 random bytes; single use per protocol exchange."""

    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != NONCE_LEN:
            raise CryptoError("nonce must be 16 bytes")

    @classmethod
    def generate(cls, rng=None) -> "Nonce":
        if rng is None:
            return cls(secrets.token_bytes(NONCE_LEN))
        return cls(rng.getrandbits(8 * NONCE_LEN).to_bytes(NONCE_LEN, "big"))

    @classmethod
    def derive(cls, *parts: bytes) -> "Nonce":
        """Deterministic sub-nonce bound to its inputs (round -> per-peer)."""
        h = hashlib.sha256(b"dgate-nonce")
        for part in parts:
            h.update(len(part).to_bytes(4, "big"))
            h.update(part)
        return cls(h.digest()[:NONCE_LEN])

    @property
    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class CodeMeasurement:
    """SHA-256 digest of a node's declared code identity."""

    digest: bytes

    @classmethod
    def of(cls, code_identity: bytes) -> "CodeMeasurement":
        return cls(hashlib.sha256(code_identity).digest())

    @property
    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class AttestationReport:
    """Platform-signed statement binding code identity, nonce, and a key."""

    code_measurement: CodeMeasurement
    nonce: Nonce
    key_binding: bytes
    tee_kind: TeeKind
    signature: bytes

    def signed_payload(self) -> bytes:
        return _ar_payload(self.code_measurement, self.nonce, self.key_binding, self.tee_kind)

    def to_dict(self) -> dict:
        return {
            "code_measurement": self.code_measurement.hex,
            "nonce": self.nonce.hex,
            "key_binding": self.key_binding.hex(),
            "tee_kind": self.tee_kind.value,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttestationReport":
        return cls(
            code_measurement=CodeMeasurement(bytes.fromhex(data["code_measurement"])),
            nonce=Nonce(bytes.fromhex(data["nonce"])),
            key_binding=bytes.fromhex(data["key_binding"]),
            tee_kind=TeeKind(data["tee_kind"]),
            signature=bytes.fromhex(data["signature"]),
        )


def _ar_payload(cm: CodeMeasurement, nonce: Nonce, key_binding: bytes, kind: TeeKind) -> bytes:
    return b"dgate-ar|" + cm.digest + b"|" + nonce.value + b"|" + key_binding + b"|" + kind.value.encode()


def attest(
    code_identity: bytes,
    nonce: Nonce,
    key_binding: bytes,
    platform: KeyPair,
    tee_kind: TeeKind = TeeKind.NONE,
) -> AttestationReport:
    """Produce a mock native attestation report signed by the platform key."""
    cm = CodeMeasurement.of(code_identity)
    payload = _ar_payload(cm, nonce, key_binding, tee_kind)
    return AttestationReport(cm, nonce, key_binding, tee_kind, platform.sign(payload))


class VerificationOutcome(enum.Enum):
    ACCEPTED = "accepted"
    BAD_SIGNATURE = "bad-signature"
    UNTRUSTED_PLATFORM = "untrusted-platform"
    CODE_MISMATCH = "code-mismatch"
    NONCE_MISMATCH = "nonce-mismatch"

    @property
    def accepted(self) -> bool:
        return self is VerificationOutcome.ACCEPTED


@dataclass(frozen=True)
class DirectoryEntry:
    node_id: NodeId
    public_key: bytes
    endpoint: tuple[str, int]
    location: GeoPoint | None


@dataclass
class PkiRegistry:
    """Trust anchors plus the GeoClient directory.

    Read-only after setup; lookups are total for registered node ids.
    """

    trusted_platform_keys: set[bytes] = field(default_factory=set)
    known_code_measurements: set[bytes] = field(default_factory=set)
    geoclient_directory: dict[NodeId, DirectoryEntry] = field(default_factory=dict)

    def add_platform(self, public_key: bytes) -> None:
        self.trusted_platform_keys.add(public_key)

    def add_code(self, code_identity: bytes) -> None:
        self.known_code_measurements.add(CodeMeasurement.of(code_identity).digest)

    def add_geoclient(
        self,
        node_id: NodeId,
        public_key: bytes,
        endpoint: tuple[str, int],
        location: GeoPoint | None,
    ) -> None:
        self.geoclient_directory[node_id] = DirectoryEntry(node_id, public_key, endpoint, location)

    def located_geoclients(self) -> list[DirectoryEntry]:
        return [e for e in self.geoclient_directory.values() if e.location is not None]

    def to_dict(self) -> dict:
        return {
            "platform_keys": sorted(k.hex() for k in self.trusted_platform_keys),
            "code_measurements": sorted(m.hex() for m in self.known_code_measurements),
            "geoclients": [
                {
                    "node_id": e.node_id.hex,
                    "public_key": e.public_key.hex(),
                    "endpoint": [e.endpoint[0], e.endpoint[1]],
                    "location": None if e.location is None else [e.location.lat, e.location.lon],
                }
                for e in sorted(self.geoclient_directory.values(), key=lambda e: e.node_id)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PkiRegistry":
        reg = cls()
        for k in data.get("platform_keys", []):
            reg.trusted_platform_keys.add(bytes.fromhex(k))
        for m in data.get("code_measurements", []):
            reg.known_code_measurements.add(bytes.fromhex(m))
        for entry in data.get("geoclients", []):
            loc = entry.get("location")
            reg.add_geoclient(
                NodeId.from_hex(entry["node_id"]),
                bytes.fromhex(entry["public_key"]),
                (entry["endpoint"][0], int(entry["endpoint"][1])),
                None if loc is None else GeoPoint(loc[0], loc[1]),
            )
        return reg

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PkiRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def verify_ar(
    ar: AttestationReport,
    expected_nonce: Nonce,
    registry: PkiRegistry,
) -> tuple[VerificationOutcome, bytes | None]:
    """Check an attestation report; returns (outcome, platform key that signed).

    Never raises: every failure maps to a specific rejection reason. The
    platform key is identified by trying each trusted key, mirroring a quote
    check against known attestation roots.
    """
    signer = None
    for candidate in registry.trusted_platform_keys:
        if verify(ar.signed_payload(), ar.signature, candidate):
            signer = candidate
            break
    if signer is None:
        # Distinguish a wrong/untrusted key from a mangled signature: an AR
        # by an unknown platform verifies under no trusted key but may be a
        # valid signature under its own embedded context; without the key we
        # can only test trusted ones, so probe for structural validity first.
        if len(ar.signature) != SIGNATURE_LEN:
            return VerificationOutcome.BAD_SIGNATURE, None
        return VerificationOutcome.UNTRUSTED_PLATFORM, None
    if ar.code_measurement.digest not in registry.known_code_measurements:
        return VerificationOutcome.CODE_MISMATCH, signer
    if ar.nonce.value != expected_nonce.value:
        return VerificationOutcome.NONCE_MISMATCH, signer
    return VerificationOutcome.ACCEPTED, signer


# --- session key agreement and AEAD channel ------------------------------

class KexPair:
    """Ephemeral X25519 pair for one channel establishment."""

    def __init__(self, private: X25519PrivateKey):
        self._private = private
        self.public: bytes = private.public_key().public_bytes_raw()

    @classmethod
    def generate(cls) -> "KexPair":
        return cls(X25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "KexPair":
        material = hashlib.sha256(b"dgate-kex" + seed).digest()
        return cls(X25519PrivateKey.from_private_bytes(material))

    def derive_session_key(self, peer_public: bytes, salt: bytes) -> bytes:
        shared = self._private.exchange(X25519PublicKey.from_public_bytes(peer_public))
        return HKDF(
            algorithm=SHA256(),
            length=SESSION_KEY_BITS // 8,
            salt=salt,
            info=b"dgate-session-key",
        ).derive(shared)


def kex_binding_payload(nonce: Nonce, initiator_kex: bytes, responder_kex: bytes) -> bytes:
    """Transcript a responder signs to bind its key share to the session."""
    return b"dgate-kex-bind|" + nonce.value + b"|" + initiator_kex + b"|" + responder_kex


class SecureChannel:
    """AES-128-GCM message protection with direction-scoped counter nonces."""

    AAD = b"dgate-channel-v0"

    def __init__(self, key: bytes, initiator: bool):
        if len(key) != SESSION_KEY_BITS // 8:
            raise CryptoError("session key must be 16 bytes")
        self._aead = AESGCM(key)
        self._send_dir = b"\x01" if initiator else b"\x02"
        self._recv_dir = b"\x02" if initiator else b"\x01"
        self._send_ctr = 0
        self._recv_ctr = 0

    def _nonce(self, direction: bytes, counter: int) -> bytes:
        return direction + b"\x00\x00\x00" + counter.to_bytes(8, "big")

    def seal(self, plaintext: bytes) -> bytes:
        nonce = self._nonce(self._send_dir, self._send_ctr)
        self._send_ctr += 1
        return self._aead.encrypt(nonce, plaintext, self.AAD)

    def open(self, ciphertext: bytes) -> bytes:
        nonce = self._nonce(self._recv_dir, self._recv_ctr)
        try:
            plaintext = self._aead.decrypt(nonce, ciphertext, self.AAD)
        except Exception as exc:
            raise CryptoError(f"channel decryption failed: {exc}") from exc
        self._recv_ctr += 1
        return plaintext

"""Post-quantum signing behind an emulated HSM, and t-of-n proof aggregation.

The enclave signs but never hands out secret key bytes. Two schemes are
supported: a seeded keyed-hash mock (fast, reproducible, fixed sizes) and an
ML-DSA provider backed by ``dilithium-py`` when it is installed.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .errors import (
    AuthorizationDenied,
    DigestMismatch,
    InvalidParameter,
    KeyExportForbidden,
    NoSuchKey,
)

DEFAULT_SIGNATURE_SIZE = 1300
DEFAULT_SIGN_COST_S = 0.010


def digest(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


class SchemeId(str, enum.Enum):
    MOCK_DETERMINISTIC = "MOCK_DETERMINISTIC"
    LATTICE_PROVIDER = "LATTICE_PROVIDER"


@dataclass(frozen=True)
class SignatureScheme:
    scheme_id: SchemeId = SchemeId.MOCK_DETERMINISTIC
    signature_size: int = DEFAULT_SIGNATURE_SIZE
    public_key_size: int = 1312
    # set only by adversary experiments; nothing on the trust path is classical
    classical: bool = False

    def __post_init__(self):
        if not 0 < self.signature_size < 1 << 16:
            raise InvalidParameter("signature_size must fit a 2-byte length prefix")
        if self.public_key_size <= 0:
            raise InvalidParameter("public_key_size must be positive")

    @classmethod
    def falcon_like(cls) -> "SignatureScheme":
        return cls(signature_size=666, public_key_size=897)

    @classmethod
    def dilithium_like(cls) -> "SignatureScheme":
        return cls(signature_size=2420, public_key_size=1312)

    @classmethod
    def ml_dsa_44(cls) -> "SignatureScheme":
        return cls(SchemeId.LATTICE_PROVIDER, signature_size=2420, public_key_size=1312)


@dataclass(frozen=True)
class KeyHandle:
    handle_id: str
    owner: int


@dataclass(frozen=True)
class Signature:
    signer: int
    data: bytes = field(repr=False)
    scheme_id: SchemeId
    message_digest: bytes


@dataclass(frozen=True)
class SigningRecord:
    owner: int
    message_digest: bytes
    context: tuple
    signature: Signature


# Mock verification table: public key -> (verification tag key, sig size, classical).
# Stands in for the lattice verification equation; entries are deterministic in
# the keygen seed, so independent simulations can share it safely.
_MOCK_VERIFIERS: dict[bytes, tuple[bytes, int, bool]] = {}


def _mock_tag(tag_key: bytes, message_digest: bytes, size: int) -> bytes:
    return hashlib.shake_256(b"qlink-mock-sig" + tag_key + message_digest).digest(size)


def _lattice():
    try:
        from dilithium_py.ml_dsa import ML_DSA_44
    except ImportError as exc:  # pragma: no cover - depends on the optional extra
        raise InvalidParameter("LATTICE_PROVIDER needs the 'lattice' extra (dilithium-py)") from exc
    return ML_DSA_44


class Enclave:
    """Emulated HSM holding every validator's secret key for one simulation.

    ``sign_cost_s`` is the simulated per-signature latency charged to metrics;
    it is a configuration constant, not a host measurement.
    """

    def __init__(self, scheme: SignatureScheme | None = None, seed: int = 0,
                 sign_cost_s: float = DEFAULT_SIGN_COST_S):
        self.scheme = scheme or SignatureScheme()
        self.seed = seed
        self.sign_cost_s = sign_cost_s
        self.signing_log: list[SigningRecord] = []
        self.signatures_made = 0
        self._counter = 0
        secrets: dict[str, bytes] = {}
        owners: dict[str, int] = {}
        publics: dict[str, bytes] = {}

        # the secret store is only reachable from these closures
        def store(handle_id: str, owner: int, secret: bytes, public: bytes) -> None:
            secrets[handle_id] = secret
            owners[handle_id] = owner
            publics[handle_id] = public

        def raw_sign(handle_id: str, message: bytes) -> bytes:
            secret = secrets[handle_id]
            if self.scheme.scheme_id is SchemeId.LATTICE_PROVIDER:
                return _lattice().sign(secret, message, deterministic=True)
            tag_key = hashlib.sha256(b"tag" + secret).digest()
            return _mock_tag(tag_key, digest(message), self.scheme.signature_size)

        self._store = store
        self._raw_sign = raw_sign
        self._owners = owners
        self._publics = publics

    def __repr__(self) -> str:
        return f"Enclave(scheme={self.scheme.scheme_id.value}, keys={len(self._owners)})"

    def __getstate__(self):
        raise KeyExportForbidden("enclave state cannot be serialized")

    def __reduce_ex__(self, protocol):
        raise KeyExportForbidden("enclave state cannot be serialized")

    def __deepcopy__(self, memo):
        raise KeyExportForbidden("enclave state cannot be copied")

    def keygen(self, owner: int) -> tuple[KeyHandle, bytes]:
        self._counter += 1
        handle_id = f"h{self._counter:06d}-{owner}"
        material = hashlib.sha256(
            b"qlink-keygen" + struct.pack(">QqQ", self.seed & (2**64 - 1), owner, self._counter)
        ).digest()
        if self.scheme.scheme_id is SchemeId.LATTICE_PROVIDER:
            public, secret = _lattice().key_derive(material)
        else:
            secret = material
            public = hashlib.shake_256(b"qlink-mock-pk" + secret).digest(self.scheme.public_key_size)
            tag_key = hashlib.sha256(b"tag" + secret).digest()
            _MOCK_VERIFIERS[public] = (tag_key, self.scheme.signature_size, self.scheme.classical)
        self._store(handle_id, owner, secret, public)
        return KeyHandle(handle_id, owner), public

    def public_key(self, handle: KeyHandle) -> bytes:
        try:
            return self._publics[handle.handle_id]
        except KeyError:
            raise NoSuchKey(handle.handle_id) from None

    def export_secret(self, handle: KeyHandle) -> bytes:
        raise KeyExportForbidden("secret keys never leave the enclave")

    def sign(self, handle: KeyHandle, message: bytes, registry=None, context: tuple = ()) -> Signature:
        owner = self._owners.get(handle.handle_id)
        if owner is None or owner != handle.owner:
            raise NoSuchKey(handle.handle_id)
        if registry is not None and not registry.is_active(owner):
            raise AuthorizationDenied(f"validator {owner} is not active")
        msg_digest = digest(message)
        sig = Signature(owner, self._raw_sign(handle.handle_id, message), self.scheme.scheme_id, msg_digest)
        self.signatures_made += 1
        self.signing_log.append(SigningRecord(owner, msg_digest, tuple(context), sig))
        return sig

    @property
    def signing_time_s(self) -> float:
        return self.signatures_made * self.sign_cost_s


def verify(public_key: bytes, message: bytes, sig: Signature) -> bool:
    if not isinstance(sig, Signature) or not isinstance(sig.data, (bytes, bytearray)):
        return False
    if sig.scheme_id is SchemeId.LATTICE_PROVIDER:
        try:
            return bool(_lattice().verify(public_key, message, bytes(sig.data)))
        except Exception:
            return False
    entry = _MOCK_VERIFIERS.get(bytes(public_key))
    if entry is None:
        return False
    tag_key, size, _ = entry
    if len(sig.data) != size:
        return False
    return hmac.compare_digest(_mock_tag(tag_key, digest(message), size), bytes(sig.data))


def quantum_forge(public_key: bytes, signer: int, message: bytes) -> Signature | None:
    """Signature a quantum-capable attacker could produce from ``public_key`` alone.

    Keys of a scheme marked classical are treated as recoverable, so the forgery
    verifies; lattice-scheme keys are not, and ``None`` is returned.
    """
    entry = _MOCK_VERIFIERS.get(bytes(public_key))
    if entry is None or not entry[2]:
        return None
    tag_key, size, _ = entry
    msg_digest = digest(message)
    return Signature(signer, _mock_tag(tag_key, msg_digest, size), SchemeId.MOCK_DETERMINISTIC, msg_digest)


@dataclass
class AggregatedProof:
    message_digest: bytes
    signatures: dict[int, Signature] = field(default_factory=dict)

    @property
    def signers(self) -> frozenset[int]:
        return frozenset(self.signatures)

    def __len__(self) -> int:
        return len(self.signatures)

    @property
    def size_bytes(self) -> int:
        return 4 + sum(10 + len(s.data) for s in self.signatures.values())

    def serialize(self) -> bytes:
        out = [struct.pack(">I", len(self.signatures))]
        for signer in sorted(self.signatures):
            data = self.signatures[signer].data
            out.append(struct.pack(">QH", signer, len(data)))
            out.append(data)
        return b"".join(out)

    @classmethod
    def deserialize(cls, blob: bytes, message_digest: bytes,
                    scheme_id: SchemeId = SchemeId.MOCK_DETERMINISTIC) -> "AggregatedProof":
        (count,) = struct.unpack_from(">I", blob, 0)
        pos = 4
        sigs: dict[int, Signature] = {}
        for _ in range(count):
            signer, length = struct.unpack_from(">QH", blob, pos)
            pos += 10
            data = blob[pos : pos + length]
            if len(data) != length:
                raise ValueError("truncated proof")
            pos += length
            sigs[signer] = Signature(signer, bytes(data), scheme_id, message_digest)
        if pos != len(blob):
            raise ValueError("trailing bytes after proof")
        return cls(message_digest, sigs)


def aggregate_proof(message: bytes, sigs: Iterable[Signature]) -> AggregatedProof:
    msg_digest = digest(message)
    proof = AggregatedProof(msg_digest)
    for sig in sigs:
        if sig.message_digest != msg_digest:
            raise DigestMismatch(f"signature by {sig.signer} covers a different message")
        proof.signatures.setdefault(sig.signer, sig)
    proof.signatures = dict(sorted(proof.signatures.items()))
    return proof


class Reason(str, enum.Enum):
    OK = "OK"
    DIGEST_MISMATCH = "DigestMismatch"
    BAD_SIGNATURE = "BadSignature"
    UNREGISTERED_SIGNER = "UnregisteredSigner"
    INACTIVE_SIGNER = "InactiveSigner"
    THRESHOLD_NOT_MET = "ThresholdNotMet"


class Verdict(NamedTuple):
    ok: bool
    reason: Reason

    def __bool__(self) -> bool:
        return self.ok


def verify_aggregate(proof: AggregatedProof, message: bytes, registry, threshold: int) -> Verdict:
    """Accept iff every signature verifies, every signer is registered and
    active, and the signers reach ``threshold`` (count or weight, per the
    registry's quorum mode)."""
    if proof.message_digest != digest(message):
        return Verdict(False, Reason.DIGEST_MISMATCH)
    for signer, sig in proof.signatures.items():
        record = registry.records.get(signer)
        if record is None:
            return Verdict(False, Reason.UNREGISTERED_SIGNER)
        if not registry.is_active(signer):
            return Verdict(False, Reason.INACTIVE_SIGNER)
        if sig.signer != signer or not verify(record.public_key, message, sig):
            return Verdict(False, Reason.BAD_SIGNATURE)
    if registry.signer_power(proof.signers) < threshold:
        return Verdict(False, Reason.THRESHOLD_NOT_MET)
    return Verdict(True, Reason.OK)

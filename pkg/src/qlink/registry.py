"""Validator registry: weights, QKD certification roles, quorum thresholds,
and misbehavior penalties."""

from __future__ import annotations

import copy
import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable

from . import custody
from .errors import (
    CertificateRequired,
    DuplicateKey,
    EmptyRegistry,
    InvalidEvidence,
    InvalidParameter,
)


class Role(str, enum.Enum):
    QKD_HUB = "QKD_HUB"
    QKD_ENDPOINT = "QKD_ENDPOINT"
    CONSUMER = "CONSUMER"


class Status(str, enum.Enum):
    ACTIVE = "ACTIVE"
    SLASHED = "SLASHED"
    DISQUALIFIED = "DISQUALIFIED"


class QuorumMode(str, enum.Enum):
    COUNT_2F1 = "COUNT_2F1"
    WEIGHT_SUPERMAJORITY = "WEIGHT_SUPERMAJORITY"


class EvidenceKind(str, enum.Enum):
    DOUBLE_SIGN = "DOUBLE_SIGN"
    INVALID_PROOF = "INVALID_PROOF"
    KEY_DELIVERY_FAILURE = "KEY_DELIVERY_FAILURE"
    CONNECTIVITY_FAILURE = "CONNECTIVITY_FAILURE"


@dataclass
class ValidatorRecord:
    id: int
    public_key: bytes = field(repr=False)
    weight: int = 1
    role: Role = Role.CONSUMER
    certificate: str | None = None
    status: Status = Status.ACTIVE

    def __post_init__(self):
        if self.weight <= 0:
            raise InvalidParameter("weight must be positive")
        if self.role in (Role.QKD_HUB, Role.QKD_ENDPOINT) and not self.certificate:
            raise CertificateRequired(f"validator {self.id} has role {self.role.value} but no certificate")


@dataclass(frozen=True)
class MisbehaviorEvidence:
    kind: EvidenceKind
    accused: int
    payload: Any


def max_faults(n: int) -> int:
    if n < 1:
        raise InvalidParameter("committee size must be >= 1")
    return (n - 1) // 3


class Registry:
    """Authoritative validator set for one simulation.

    ``cert_allowlist`` of ``None`` accepts any non-empty certificate id.
    """

    def __init__(self, quorum_mode: QuorumMode = QuorumMode.COUNT_2F1,
                 cert_allowlist: Iterable[str] | None = None):
        self.quorum_mode = QuorumMode(quorum_mode)
        self.cert_allowlist = None if cert_allowlist is None else frozenset(cert_allowlist)
        self.records: dict[int, ValidatorRecord] = {}
        self.rewards: Counter[int] = Counter()
        self.hub_assignments: dict[int, int] = {}
        self.unserved: set[int] = set()
        self.penalties: list[tuple[EvidenceKind, int]] = []

    def __repr__(self) -> str:
        return f"Registry(n={len(self.records)}, active={len(self.active_ids)}, mode={self.quorum_mode.value})"

    # -- membership -------------------------------------------------------

    def register(self, record: ValidatorRecord) -> "Registry":
        if record.id in self.records:
            raise DuplicateKey(f"validator id {record.id} already registered")
        if any(r.public_key == record.public_key for r in self.records.values()):
            raise DuplicateKey(f"public key of validator {record.id} already registered")
        if record.role in (Role.QKD_HUB, Role.QKD_ENDPOINT):
            if self.cert_allowlist is not None and record.certificate not in self.cert_allowlist:
                raise CertificateRequired(f"certificate {record.certificate!r} is not on the allowlist")
        self.records[record.id] = record
        return self

    def is_active(self, vid: int) -> bool:
        rec = self.records.get(vid)
        return rec is not None and rec.status is Status.ACTIVE

    @property
    def active_ids(self) -> list[int]:
        return sorted(v for v, r in self.records.items() if r.status is Status.ACTIVE)

    @property
    def total_weight(self) -> int:
        return sum(r.weight for r in self.records.values() if r.status is Status.ACTIVE)

    @property
    def hubs(self) -> list[int]:
        return [v for v in self.active_ids if self.records[v].role is Role.QKD_HUB]

    @property
    def qkd_hub_present(self) -> bool:
        return any(self.records[v].role in (Role.QKD_HUB, Role.QKD_ENDPOINT) for v in self.active_ids)

    def public_key(self, vid: int) -> bytes:
        return self.records[vid].public_key

    # -- quorum -----------------------------------------------------------

    def quorum_threshold(self, mode: QuorumMode | None = None) -> int:
        mode = QuorumMode(mode or self.quorum_mode)
        active = self.active_ids
        if not active:
            raise EmptyRegistry("no active validators")
        if mode is QuorumMode.COUNT_2F1:
            return 2 * max_faults(len(active)) + 1
        return 2 * self.total_weight // 3 + 1

    def finality_threshold(self, strict: bool = True) -> int:
        """Quorum threshold used for finality; ``strict`` also enforces T > 2/3 of the count."""
        t = self.quorum_threshold()
        if strict and self.quorum_mode is QuorumMode.COUNT_2F1:
            t = max(t, 2 * len(self.active_ids) // 3 + 1)
        return t

    def signer_power(self, signers: Iterable[int], mode: QuorumMode | None = None) -> int:
        mode = QuorumMode(mode or self.quorum_mode)
        live = [v for v in set(signers) if self.is_active(v)]
        if mode is QuorumMode.COUNT_2F1:
            return len(live)
        return sum(self.records[v].weight for v in live)

    def quorum_met(self, signers: Iterable[int], threshold: int | None = None,
                   mode: QuorumMode | None = None) -> bool:
        if threshold is None:
            if not self.active_ids:
                return False
            threshold = self.quorum_threshold(mode)
        return self.signer_power(signers, mode) >= threshold

    # -- hub-and-spoke ----------------------------------------------------

    def assign_hub(self, consumer: int, hub: int) -> None:
        if self.records[hub].role is not Role.QKD_HUB:
            raise InvalidParameter(f"validator {hub} is not a QKD hub")
        self.hub_assignments[consumer] = hub
        self.unserved.discard(consumer)

    def _reassign_from(self, failed_hub: int) -> None:
        spares = [h for h in self.hubs if h != failed_hub]
        for consumer, hub in sorted(self.hub_assignments.items()):
            if hub != failed_hub:
                continue
            if spares:
                self.hub_assignments[consumer] = spares[0]
            else:
                del self.hub_assignments[consumer]
                self.unserved.add(consumer)

    # -- penalties --------------------------------------------------------

    def _validate_double_sign(self, evidence: MisbehaviorEvidence) -> None:
        try:
            first, second = evidence.payload
        except (TypeError, ValueError):
            raise InvalidEvidence("double-sign evidence needs exactly two votes") from None
        rec = self.records.get(evidence.accused)
        if rec is None:
            raise InvalidEvidence(f"unknown validator {evidence.accused}")
        for vote in (first, second):
            if vote.signer != evidence.accused:
                raise InvalidEvidence("vote is not signed by the accused")
            if not custody.verify(rec.public_key, vote.signing_bytes(), vote.signature):
                raise InvalidEvidence("vote signature does not verify")
        if (first.height, first.round, first.phase) != (second.height, second.round, second.phase):
            raise InvalidEvidence("votes are not at the same height/round/phase")
        if first.proposal_digest == second.proposal_digest:
            raise InvalidEvidence("votes do not conflict")

    def handle_evidence(self, evidence: MisbehaviorEvidence, delivery_log: Iterable[Any] = ()) -> "Registry":
        accused = evidence.accused
        if accused not in self.records:
            raise InvalidEvidence(f"unknown validator {accused}")
        kind = EvidenceKind(evidence.kind)
        rec = self.records[accused]

        if kind is EvidenceKind.DOUBLE_SIGN:
            self._validate_double_sign(evidence)
            new_status = Status.SLASHED
        elif kind is EvidenceKind.INVALID_PROOF:
            try:
                proof, message, threshold = evidence.payload
            except (TypeError, ValueError):
                raise InvalidEvidence("invalid-proof evidence needs (proof, message, threshold)") from None
            if accused not in proof.signers:
                raise InvalidEvidence("accused did not sign the submitted proof")
            if custody.verify_aggregate(proof, message, self, threshold):
                raise InvalidEvidence("submitted proof is valid")
            new_status = Status.SLASHED
        else:
            if evidence.payload not in set(delivery_log):
                raise InvalidEvidence(f"delivery log has no entry {evidence.payload!r}")
            if kind is EvidenceKind.KEY_DELIVERY_FAILURE and rec.role is Role.CONSUMER:
                raise InvalidEvidence("only QKD-equipped validators deliver keys")
            new_status = Status.DISQUALIFIED

        if rec.status is Status.ACTIVE:
            rec.status = new_status
            self.penalties.append((kind, accused))
        if rec.role is Role.QKD_HUB and rec.status is not Status.ACTIVE:
            self._reassign_from(accused)
        return self

    def reward_round(self, signers: Iterable[int]) -> None:
        for v in signers:
            if self.is_active(v):
                self.rewards[v] += 1

    def snapshot(self) -> "Registry":
        return copy.deepcopy(self)

    def state(self) -> dict:
        """Comparable, JSON-friendly view of the registry."""
        return {
            "quorum_mode": self.quorum_mode.value,
            "validators": [
                {"id": r.id, "weight": r.weight, "role": r.role.value,
                 "certificate": r.certificate, "status": r.status.value}
                for r in sorted(self.records.values(), key=lambda r: r.id)
            ],
            "total_weight": self.total_weight,
            "hub_assignments": {str(k): v for k, v in sorted(self.hub_assignments.items())},
            "unserved": sorted(self.unserved),
        }

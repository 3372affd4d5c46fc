"""Two-phase (prevote/precommit) BFT round machine with a rotating leader.

Every consensus message travels OTP-sealed over the QKD link between the two
validators (or relayed through an active QKD hub), and every vote is signed
inside the enclave. Rounds are phase-synchronous; simulated time is derived
from per-message link delay and per-signature cost along the critical path.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from . import custody
from .custody import AggregatedProof, Enclave, KeyHandle, Signature
from .errors import EmptyRegistry, InsufficientKey, NoLocalVerification
from .registry import EvidenceKind, MisbehaviorEvidence, Registry


class Phase(str, enum.Enum):
    PREVOTE = "PREVOTE"
    PRECOMMIT = "PRECOMMIT"


class FaultKind(str, enum.Enum):
    SILENT = "silent"
    EQUIVOCATE = "equivocate"
    CONFLICTING_VOTE = "conflicting-vote"


def _h(*parts: bytes) -> bytes:
    return hashlib.sha256(b"|".join(parts)).digest()


@dataclass(frozen=True)
class Proposal:
    height: int
    round: int
    leader: int
    events: tuple[bytes, ...]
    digest: bytes = b""

    def __post_init__(self):
        if not self.events:
            raise ValueError("a proposal carries at least one event")
        expected = self.compute_digest(self.height, self.round, self.events)
        if not self.digest:
            object.__setattr__(self, "digest", expected)
        elif self.digest != expected:
            raise ValueError("digest does not bind (height, round, events)")

    @staticmethod
    def compute_digest(height: int, round: int, events: tuple[bytes, ...]) -> bytes:
        return _h(b"proposal", struct.pack(">QQ", height, round), *(custody.digest(e) for e in events))

    def encode(self) -> bytes:
        body = [struct.pack(">QQQI", self.height, self.round, self.leader, len(self.events))]
        for e in self.events:
            body.append(struct.pack(">I", len(e)) + e)
        return b"".join(body) + self.digest


def vote_bytes(phase: Phase, height: int, round: int, proposal_digest: bytes) -> bytes:
    return b"qlink-vote|" + Phase(phase).value.encode() + struct.pack(">QQ", height, round) + proposal_digest


@dataclass(frozen=True)
class Vote:
    phase: Phase
    height: int
    round: int
    proposal_digest: bytes
    signer: int
    signature: Signature
    bundle_signatures: tuple[Signature, ...] = ()

    def signing_bytes(self) -> bytes:
        return vote_bytes(self.phase, self.height, self.round, self.proposal_digest)

    def encode(self) -> bytes:
        parts = [self.signing_bytes(), struct.pack(">QH", self.signer, len(self.signature.data)), self.signature.data]
        for s in self.bundle_signatures:
            parts.append(struct.pack(">H", len(s.data)) + s.data)
        return b"".join(parts)


@dataclass
class FinalityCertificate:
    proposal: Proposal
    proof: AggregatedProof
    finalized_at: float
    event_proofs: dict[bytes, AggregatedProof] = field(default_factory=dict)

    @property
    def message(self) -> bytes:
        return vote_bytes(Phase.PRECOMMIT, self.proposal.height, self.proposal.round, self.proposal.digest)

    def verify(self, registry: Registry, threshold: int) -> bool:
        return bool(custody.verify_aggregate(self.proof, self.message, registry, threshold))


class FailureReason(str, enum.Enum):
    LIVENESS_LOST = "LivenessLost"


@dataclass
class RoundFailure:
    height: int
    reason: FailureReason
    rounds_attempted: int
    diagnosis: str


@dataclass
class ConsensusConfig:
    propose_wait_s: float = 1.0
    phase_timeout_s: float = 1.0
    link_delay_s: float = 0.005
    seal_cost_s: float = 0.0001
    max_rounds: int = 4
    # require T > 2/3 of the committee even when 2f+1 is smaller (n != 3f+1)
    strict_supermajority: bool = True


def select_leader(height: int, round: int, active_set: Iterable[int], seed: bytes = b"") -> int:
    """Round-robin over a seeded permutation that is reshuffled every epoch of n slots."""
    ids = sorted(set(active_set))
    if not ids:
        raise EmptyRegistry("no active validators to lead")
    n = len(ids)
    slot = height + round
    epoch = struct.pack(">Q", slot // n)
    perm = sorted(ids, key=lambda v: _h(b"leader", seed, epoch, struct.pack(">q", v)))
    return perm[slot % n]


def cast_vote(validator: int, phase: Phase, proposal: Proposal, enclave: Enclave, handle: KeyHandle,
              registry: Registry | None = None, verified: bool = True) -> Vote:
    """Sign a vote for ``proposal``. Precommits also sign each event in the bundle."""
    if not verified:
        raise NoLocalVerification(f"validator {validator} has not verified the proposal's events")
    ctx = (Phase(phase).value, proposal.height, proposal.round, proposal.digest)
    sig = enclave.sign(handle, vote_bytes(phase, proposal.height, proposal.round, proposal.digest),
                       registry=registry, context=ctx)
    bundle: tuple[Signature, ...] = ()
    if phase is Phase.PRECOMMIT:
        bundle = tuple(enclave.sign(handle, e, registry=registry, context=("BUNDLE",) + ctx[1:])
                       for e in proposal.events)
    return Vote(Phase(phase), proposal.height, proposal.round, proposal.digest, validator, sig, bundle)


def detect_equivocation(votes: Iterable[Vote]) -> list[MisbehaviorEvidence]:
    seen: dict[tuple, dict[bytes, Vote]] = defaultdict(dict)
    for v in votes:
        seen[(v.signer, v.height, v.round, v.phase.value)].setdefault(v.proposal_digest, v)
    evidence = []
    for key in sorted(seen):
        by_digest = seen[key]
        if len(by_digest) >= 2:
            first, second = (by_digest[d] for d in sorted(by_digest)[:2])
            evidence.append(MisbehaviorEvidence(EvidenceKind.DOUBLE_SIGN, key[0], (first, second)))
    return evidence


def finalize_check(votes: Iterable[Vote], registry: Registry, threshold: int) -> AggregatedProof | str:
    groups: dict[tuple[int, int, bytes], dict[int, Vote]] = defaultdict(dict)
    for v in votes:
        if v.phase is not Phase.PRECOMMIT:
            continue
        groups[(v.height, v.round, v.proposal_digest)].setdefault(v.signer, v)
    best = None
    for key in sorted(groups):
        power = registry.signer_power(groups[key])
        if power >= threshold and (best is None or power > best[0]):
            best = (power, key)
    if best is None:
        return "NoQuorum"
    height, round, dgst = best[1]
    return custody.aggregate_proof(vote_bytes(Phase.PRECOMMIT, height, round, dgst),
                                   [v.signature for v in groups[best[1]].values()])


class Transport:
    """Delivers consensus messages OTP-sealed over QKD links.

    A pair without a live direct link is relayed through an active QKD hub that
    has live links to both ends (trusted-relay); each hop is sealed separately.
    """

    def __init__(self, links: Mapping[tuple[int, int], "object"], registry: Registry):
        self.links = dict(links)
        self.registry = registry
        self.sent = 0
        self.delivered = 0
        self.missed = 0
        self.payload_bits = 0
        self.key_bits = 0
        self.hop_messages = 0

    def _live(self, a: int, b: int):
        link = self.links.get((min(a, b), max(a, b)))
        return link if link is not None and link.alive else None

    def route(self, a: int, b: int) -> list[tuple[int, int]] | None:
        if self._live(a, b):
            return [(a, b)]
        for hub in self.registry.hubs:
            if hub in (a, b):
                continue
            if self._live(a, hub) and self._live(hub, b):
                return [(a, hub), (hub, b)]
        return None

    def send(self, sender: int, receiver: int, payload: bytes, t: float) -> tuple[bool, int]:
        """Seal/open ``payload`` along the route at time ``t``; returns (delivered, hops)."""
        self.sent += 1
        path = self.route(sender, receiver)
        if path is None:
            self.missed += 1
            return False, 0
        for a, b in path:
            link = self._live(a, b)
            link.advance_to(t)
            try:
                sealed = link.seal(payload, a)
            except InsufficientKey:
                self.missed += 1
                return False, 0
            link.open(sealed)
            self.hop_messages += 1
            self.payload_bits += 8 * len(payload)
            self.key_bits += sealed.key_bits
        self.delivered += 1
        return True, len(path)


@dataclass
class RoundResult:
    height: int
    certificate: FinalityCertificate | None
    failure: RoundFailure | None
    rounds: int
    latency_s: float
    crypto_s: float
    certified_digests: set[bytes]
    trace: list[dict]


class Committee:
    """Validators of one simulation sharing a registry, an enclave and a transport."""

    def __init__(self, registry: Registry, enclave: Enclave, handles: Mapping[int, KeyHandle],
                 transport: Transport | None = None, config: ConsensusConfig | None = None,
                 seed: bytes = b""):
        self.registry = registry
        self.enclave = enclave
        self.handles = dict(handles)
        self.transport = transport
        self.config = config or ConsensusConfig()
        self.seed = seed
        self.observed_votes: list[Vote] = []

    def threshold(self) -> int:
        return self.registry.finality_threshold(self.config.strict_supermajority)

    def _deliver(self, sender: int, receiver: int, payload: bytes, t: float) -> tuple[bool, int]:
        if sender == receiver:
            return True, 0
        if self.transport is None:
            return True, 1
        return self.transport.send(sender, receiver, payload, t)

    def run_height(self, height: int, events: list[bytes], faults: Mapping[int, FaultKind] | None = None,
                   start: float = 0.0, verifier: Callable[[int, bytes], bool] | None = None) -> RoundResult:
        cfg = self.config
        faults = {v: FaultKind(k) for v, k in (faults or {}).items()}
        genuine = set(events)
        verifier = verifier or (lambda _v, e: e in genuine)
        active = self.registry.active_ids
        honest = [v for v in active if v not in faults]
        T = self.threshold()
        sign = self.enclave.sign_cost_s
        d = cfg.link_delay_s

        trace: list[dict] = []
        precommitted: set[int] = set()
        all_precommits: list[Vote] = []
        t = start
        crypto = 0.0
        events_t = tuple(events)

        for rnd in range(cfg.max_rounds):
            t0 = t
            leader = select_leader(height, rnd, active, self.seed)
            others = [v for v in active if v != leader]
            honest_prop = Proposal(height, rnd, leader, events_t)
            alt_events = events_t[::-1] if len(events_t) > 1 else events_t * 2
            alt_prop = Proposal(height, rnd, leader, alt_events)
            fake_prop = Proposal(height, rnd, leader, (_h(b"forged", struct.pack(">QQ", height, rnd)),))

            # -- propose
            kind = faults.get(leader)
            outgoing: dict[int, Proposal] = {}
            if kind is None:
                outgoing = {v: honest_prop for v in others}
            elif kind is FaultKind.EQUIVOCATE:
                half = len(others) // 2
                outgoing = {v: (honest_prop if i < half else alt_prop) for i, v in enumerate(others)}
            elif kind is FaultKind.CONFLICTING_VOTE:
                outgoing = {v: fake_prop for v in others}
            t_send = t0 + cfg.propose_wait_s + sign
            received: dict[int, Proposal] = {}
            if kind is None:
                received[leader] = honest_prop
            hops = 1
            for prop in sorted(set(outgoing.values()), key=lambda p: p.digest):
                self.enclave.sign(self.handles[leader], prop.encode(), context=("PROPOSAL", height, rnd))
            for v, prop in outgoing.items():
                ok, n_hops = self._deliver(leader, v, prop.encode(), t_send)
                hops = max(hops, n_hops)
                if ok:
                    received[v] = prop
            known = {p.digest: p for p in set(outgoing.values()) | set(received.values())}
            trace.append({"type": "proposal", "height": height, "round": rnd, "leader": leader,
                          "digests": sorted(x.hex() for x in known), "fault": kind.value if kind else None})
            t_arrive = t_send + d * hops
            round_crypto = sign + cfg.seal_cost_s

            # -- prevote
            prevote_view: dict[int, dict[bytes, set[int]]] = {v: defaultdict(set) for v in honest}
            votes_out: list[Vote] = []
            for v in active:
                kind_v = faults.get(v)
                if kind_v is FaultKind.SILENT:
                    continue
                if kind_v is None:
                    prop = received.get(v)
                    if prop is None:
                        continue
                    try:
                        vote = cast_vote(v, Phase.PREVOTE, prop, self.enclave, self.handles[v], self.registry,
                                         verified=all(verifier(v, e) for e in prop.events))
                    except NoLocalVerification:
                        trace.append({"type": "refuse", "height": height, "round": rnd, "validator": v})
                        continue
                    votes_out.append(vote)
                else:
                    votes_out.extend(self._byzantine_votes(v, kind_v, Phase.PREVOTE, received.get(v),
                                                           known, fake_prop))
            t_pv = t_arrive + sign
            hops = self._broadcast(votes_out, active, prevote_view, t_pv)
            t_pv_arrive = t_pv + d * hops
            round_crypto += sign + cfg.seal_cost_s

            # -- precommit
            precommit_view: dict[int, dict[bytes, dict[int, Vote]]] = {v: defaultdict(dict) for v in honest}
            votes_out = []
            for v in active:
                kind_v = faults.get(v)
                if kind_v is FaultKind.SILENT:
                    continue
                if kind_v is None:
                    prop = received.get(v)
                    if prop is None or v in precommitted:
                        continue
                    if self.registry.signer_power(prevote_view[v][prop.digest]) < T:
                        continue
                    votes_out.append(cast_vote(v, Phase.PRECOMMIT, prop, self.enclave, self.handles[v],
                                               self.registry))
                    precommitted.add(v)
                else:
                    votes_out.extend(self._byzantine_votes(v, kind_v, Phase.PRECOMMIT, received.get(v),
                                                           known, fake_prop))
            all_precommits.extend(votes_out)
            t_pc = t_pv_arrive + sign * (1 + len(events_t))
            hops = self._broadcast(votes_out, active, precommit_view, t_pc)
            t_commit = t_pc + d * hops
            round_crypto += sign * (1 + len(events_t)) + cfg.seal_cost_s

            # -- commit
            certificate = None
            for v in honest:
                for dgst, vmap in sorted(precommit_view[v].items()):
                    if self.registry.signer_power(vmap) >= T and dgst in known:
                        proof = finalize_check(vmap.values(), self.registry, T)
                        if isinstance(proof, AggregatedProof) and certificate is None:
                            certificate = self._certificate(known[dgst], proof, vmap, t_commit)
                        break

            for vote in votes_out:
                trace.append({"type": "precommit", "height": height, "round": rnd,
                              "signer": vote.signer, "digest": vote.proposal_digest.hex()})

            certified = self._certifiable(all_precommits, T)
            if certificate is not None:
                crypto += round_crypto
                trace.append({"type": "certificate", "height": height, "round": rnd,
                              "digest": certificate.proposal.digest.hex(),
                              "signers": sorted(certificate.proof.signers),
                              "finalized_at": round(t_commit, 6)})
                self.registry.reward_round(certificate.proof.signers)
                return RoundResult(height, certificate, None, rnd + 1, t_commit - start, crypto,
                                   certified, trace)
            crypto += round_crypto
            t = t0 + cfg.propose_wait_s + 3 * cfg.phase_timeout_s
            trace.append({"type": "timeout", "height": height, "round": rnd})

        failure = RoundFailure(height, FailureReason.LIVENESS_LOST, cfg.max_rounds,
                               f"no precommit quorum (T={T}) from {len(honest)} honest of {len(active)} "
                               f"active validators within {cfg.max_rounds} rounds")
        trace.append({"type": "failure", "height": height, "reason": failure.reason.value,
                      "diagnosis": failure.diagnosis})
        return RoundResult(height, None, failure, cfg.max_rounds, t - start, crypto,
                           self._certifiable(all_precommits, T), trace)

    def _byzantine_votes(self, v: int, kind: FaultKind, phase: Phase, received: Proposal | None,
                         known: dict[bytes, Proposal], fake: Proposal) -> list[Vote]:
        handle = self.handles[v]
        if kind is FaultKind.EQUIVOCATE:
            targets = list(known.values())
            if len(targets) < 2:
                targets.append(fake)
        else:
            others = [p for p in known.values() if received is None or p.digest != received.digest]
            targets = [others[0] if others else fake]
        return [cast_vote(v, phase, p, self.enclave, handle) for p in sorted(targets, key=lambda p: p.digest)]

    def _broadcast(self, votes: list[Vote], active: list[int], views: dict, t: float) -> int:
        hops = 1
        checked: dict[int, bool] = {}
        for vote in votes:
            payload = vote.encode()
            for r in active:
                ok, n_hops = self._deliver(vote.signer, r, payload, t)
                hops = max(hops, n_hops)
                if not ok or r not in views:
                    continue
                key = id(vote)
                if key not in checked:
                    rec = self.registry.records.get(vote.signer)
                    checked[key] = rec is not None and custody.verify(rec.public_key, vote.signing_bytes(),
                                                                      vote.signature)
                    if checked[key]:
                        self.observed_votes.append(vote)
                if not checked[key]:
                    continue
                view = views[r][vote.proposal_digest]
                if isinstance(view, set):
                    view.add(vote.signer)
                else:
                    view.setdefault(vote.signer, vote)
        return hops

    def _certificate(self, proposal: Proposal, proof: AggregatedProof, vmap: dict[int, Vote],
                     at: float) -> FinalityCertificate:
        event_proofs = {}
        for i, event in enumerate(proposal.events):
            sigs = [vote.bundle_signatures[i] for vote in vmap.values() if len(vote.bundle_signatures) > i]
            event_proofs[custody.digest(event)] = custody.aggregate_proof(event, sigs)
        return FinalityCertificate(proposal, proof, at, event_proofs)

    def _certifiable(self, precommits: list[Vote], T: int) -> set[bytes]:
        """Digests for which *some* party holding all precommits could build a certificate."""
        groups: dict[bytes, set[int]] = defaultdict(set)
        for vote in precommits:
            groups[vote.proposal_digest].add(vote.signer)
        return {dgst for dgst, signers in groups.items() if self.registry.signer_power(signers) >= T}


def run_round(height: int, committee: Committee, events: list[bytes],
              faults: Mapping[int, FaultKind] | None = None, start: float = 0.0) -> FinalityCertificate | RoundFailure:
    result = committee.run_height(height, events, faults, start)
    return result.certificate if result.certificate is not None else result.failure

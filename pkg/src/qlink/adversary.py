"""Scripted attacks run against a live simulated bridge.

Each script drives the real modules (enclave, contracts, consensus, QKD links)
and reports which defense stopped it.
"""

from __future__ import annotations

import copy
import enum
import pickle
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from . import chains, custody
from .consensus import FaultKind, detect_equivocation
from .errors import InvalidEvidence, InvalidScenario, KeyExportForbidden
from .qkd import Bits, KeyBlock, SealedMessage
from .registry import EvidenceKind, MisbehaviorEvidence, Role, Status, max_faults


class AttackKind(str, enum.Enum):
    KEY_THEFT = "KEY_THEFT"
    PROOF_FORGERY = "PROOF_FORGERY"
    REPLAY = "REPLAY"
    HARVEST_NOW_DECRYPT_LATER = "HARVEST_NOW_DECRYPT_LATER"
    DOUBLE_SIGN = "DOUBLE_SIGN"
    QKD_DOS = "QKD_DOS"
    MINORITY_COLLUSION = "MINORITY_COLLUSION"


class Mechanism(str, enum.Enum):
    KEY_EXPORT_FORBIDDEN = "KeyExportForbidden"
    PQC_SIGNATURE_VERIFICATION = "PqcSignatureVerification"
    REJECT_REPLAY = "RejectReplay"
    ONE_TIME_PAD_SECRECY = "OneTimePadSecrecy"
    EQUIVOCATION_SLASHING = "EquivocationSlashing"
    HUB_REROUTE = "HubReroute"
    REJECT_THRESHOLD = "RejectThreshold"


MECHANISM = {
    AttackKind.KEY_THEFT: Mechanism.KEY_EXPORT_FORBIDDEN,
    AttackKind.PROOF_FORGERY: Mechanism.PQC_SIGNATURE_VERIFICATION,
    AttackKind.REPLAY: Mechanism.REJECT_REPLAY,
    AttackKind.HARVEST_NOW_DECRYPT_LATER: Mechanism.ONE_TIME_PAD_SECRECY,
    AttackKind.DOUBLE_SIGN: Mechanism.EQUIVOCATION_SLASHING,
    AttackKind.QKD_DOS: Mechanism.HUB_REROUTE,
    AttackKind.MINORITY_COLLUSION: Mechanism.REJECT_THRESHOLD,
}

THREAT_CATEGORY = {
    AttackKind.KEY_THEFT: "validator key compromise",
    AttackKind.PROOF_FORGERY: "quantum signature forgery",
    AttackKind.REPLAY: "bridge proof replay",
    AttackKind.HARVEST_NOW_DECRYPT_LATER: "harvest now, decrypt later",
    AttackKind.DOUBLE_SIGN: "validator equivocation",
    AttackKind.QKD_DOS: "denial of service on the key plane",
    AttackKind.MINORITY_COLLUSION: "minority validator collusion",
}


class Label(str, enum.Enum):
    DEFENDED = "DEFENDED"
    BREACH = "BREACH"
    EXPECTED_BREACH = "EXPECTED_BREACH"
    TOPOLOGY_VIOLATION = "TOPOLOGY_VIOLATION"
    CONTROL = "CONTROL"


@dataclass
class AttackScenario:
    kind: AttackKind
    params: dict[str, Any] = field(default_factory=dict)
    research_mode: bool = False

    def __post_init__(self):
        self.kind = AttackKind(self.kind)


@dataclass
class AttackOutcome:
    kind: AttackKind
    defended: bool
    mechanism: Mechanism
    trace: list[dict] = field(default_factory=list)
    label: Label = Label.DEFENDED
    detail: dict[str, Any] = field(default_factory=dict)

    @property
    def counts_toward_acceptance(self) -> bool:
        return self.label not in (Label.EXPECTED_BREACH, Label.CONTROL)

    def summary(self) -> dict:
        return {"kind": self.kind.value, "defended": self.defended, "mechanism": self.mechanism.value,
                "label": self.label.value, "threat": THREAT_CATEGORY[self.kind], "detail": self.detail,
                "trace_events": len(self.trace)}


def _outcome(kind: AttackKind, defended: bool, **detail) -> AttackOutcome:
    return AttackOutcome(kind, defended, MECHANISM[kind], label=Label.DEFENDED if defended else Label.BREACH,
                         detail=detail)


# -- helpers ----------------------------------------------------------------

def fabricated_event(system, amount: int = 1_000_000, nonce: int = 2**40) -> chains.LockEvent:
    """A lock that never happened on the source chain."""
    src = system.source.chain_id
    height = system.source.tip_height + 1
    return chains.LockEvent(chains.event_id_for(src, height, 0, nonce), src, amount, "mallory",
                            "mallory@eth", height, 0, nonce)


def finalize_lock(system, t: float, amount: int = 100) -> tuple[chains.LockEvent, custody.AggregatedProof]:
    """Honest path: lock, bury under k blocks, certify by consensus; returns the mint bundle."""
    from .sim.experiments import minimal_bundle

    cfg = system.config
    event = chains.submit_lock(system.src_contract, system.source, "alice", amount, "alice@eth")
    for i in range(cfg.k_confirmations):
        system.source.append_block(timestamp=t + i * cfg.source_block_interval_s)
    message = chains.mint_message(system.dest.chain_id, event)
    result = system.committee.run_height(0, [message], start=t)
    if result.certificate is None:
        raise InvalidScenario(f"honest consensus failed: {result.failure.diagnosis}")
    proof = result.certificate.event_proofs[custody.digest(message)]
    return event, minimal_bundle(proof, system.registry, system.threshold())


# -- scripts ------------------------------------------------------------------

def _key_theft(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    enclave, log = system.enclave, system.log
    probes: dict[str, Callable[[], Any]] = {}
    for vid, handle in sorted(system.handles.items()):
        probes[f"export_secret:{vid}"] = lambda h=handle: enclave.export_secret(h)
    probes["pickle"] = lambda: pickle.dumps(enclave)
    probes["deepcopy"] = lambda: copy.deepcopy(enclave)
    probes["copy"] = lambda: copy.copy(enclave)
    blocked, leaked = [], []
    for name, probe in probes.items():
        try:
            probe()
        except KeyExportForbidden:
            blocked.append(name)
        else:
            leaked.append(name)
        log.append(t_us, "attack_probe", attack=AttackKind.KEY_THEFT, probe=name, blocked=name in blocked)
    # anything reachable without touching private attributes must be public material only
    publics = {system.registry.public_key(v) for v in system.handles}
    exposed = [name for name, value in vars(enclave).items() if not name.startswith("_")
               and isinstance(value, (bytes, bytearray)) and bytes(value) not in publics]
    return _outcome(AttackKind.KEY_THEFT, not leaked and not exposed, probes=len(probes), leaked=leaked,
                    exposed=exposed)


def forge_proof(system, message: bytes, signers: list[int]) -> custody.AggregatedProof:
    """Best forgery a quantum-capable attacker manages without any enclave access."""
    rng = random.Random(b"forge" + message)
    sigs = []
    for v in signers:
        pk = system.registry.public_key(v)
        sig = custody.quantum_forge(pk, v, message)
        if sig is None:
            size = system.enclave.scheme.signature_size
            sig = custody.Signature(v, rng.randbytes(size), system.enclave.scheme.scheme_id, custody.digest(message))
        sigs.append(sig)
    return custody.aggregate_proof(message, sigs)


def _proof_forgery(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    event = fabricated_event(system)
    message = chains.mint_message(system.dest.chain_id, event)
    signers = system.registry.active_ids
    proof = forge_proof(system, message, signers)
    res = chains.contract_mint(system.dst_contract, event, proof)
    system.log.append(t_us, "attack_mint", attack=AttackKind.PROOF_FORGERY, outcome=res.outcome,
                      signers=signers, classical=system.enclave.scheme.classical)
    return _outcome(AttackKind.PROOF_FORGERY, not res.ok, contract_outcome=res.outcome.value)


def _replay(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    event, bundle = finalize_lock(system, t_us / 1e6)
    first = chains.contract_mint(system.dst_contract, event, bundle)
    second = chains.contract_mint(system.dst_contract, event, bundle)
    system.log.append(t_us, "attack_mint", attack=AttackKind.REPLAY, first=first.outcome, replay=second.outcome,
                      minted_total=system.dst_contract.minted_total)
    defended = first.ok and second.outcome is chains.Outcome.REJECT_REPLAY
    return _outcome(AttackKind.REPLAY, defended, first=first.outcome.value, replay=second.outcome.value,
                    minted_total=system.dst_contract.minted_total)


def monobit_deviation(value: int, length: int) -> float:
    return abs(value.bit_count() / length - 0.5)


def harvest_then_decrypt(recorded: list[SealedMessage], disclosed_keys: list[KeyBlock] | None = None,
                         candidates: list[Bits] | None = None,
                         true_plaintexts: list[Bits] | None = None, tolerance: float = 0.02) -> AttackOutcome:
    """Attacker holds ciphertexts; with no key, every candidate plaintext maps to a
    uniform-looking pad, so the ciphertexts carry no information. ``disclosed_keys``
    (pad blocks, in the order of ``recorded``) is the control case."""
    kind = AttackKind.HARVEST_NOW_DECRYPT_LATER
    total = sum(m.ciphertext.length for m in recorded)
    if disclosed_keys is not None:
        recovered = [m.ciphertext ^ Bits(k.bits, k.length) for m, k in zip(recorded, disclosed_keys)]
        broke = true_plaintexts is not None and recovered == list(true_plaintexts)
        return AttackOutcome(kind, not broke, MECHANISM[kind], label=Label.CONTROL,
                             detail={"decrypted": broke, "messages": len(recorded)})
    candidates = candidates or [Bits(0, m.ciphertext.length) for m in recorded]
    stream = 0
    for msg, cand in zip(recorded, candidates):
        stream = (stream << msg.ciphertext.length) | (msg.ciphertext ^ cand).value
    deviation = monobit_deviation(stream, total)
    defended = deviation < tolerance
    out = _outcome(kind, defended, bits=total, monobit_deviation=round(deviation, 6))
    return out


def _harvest(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    link = next(iter(sorted(system.links.items())))[1]
    n_msgs = int(scenario.params.get("messages", 200))
    bits = 500
    # structured plaintexts: a repeated ASCII transfer order, heavily biased
    order = int.from_bytes((b"pay 100 to bob;" * 5)[:62], "big") >> 4
    plaintexts = [Bits(order, bits) for _ in range(n_msgs)]
    t = t_us / 1e6
    link.advance_to(max(t, link.start_delay_s + 1.0))
    recorded = [link.seal(p, link.link_id[0]) for p in plaintexts]
    for msg in recorded:
        link.open(msg)
    system.log.append(t_us, "attack_record", attack=AttackKind.HARVEST_NOW_DECRYPT_LATER,
                      messages=len(recorded), link=list(link.link_id))
    guesses = [Bits(0, bits), Bits(random.Random(7).getrandbits(bits), bits)]
    worst = 0.0
    for g in guesses:
        res = harvest_then_decrypt(recorded, candidates=[g] * len(recorded))
        worst = max(worst, res.detail["monobit_deviation"])
    plain_dev = monobit_deviation(order, bits)
    pads = [KeyBlock(m.key_offset, link.buffer.stream.bits(m.key_offset, bits), bits) for m in recorded]
    control = harvest_then_decrypt(recorded, disclosed_keys=pads, true_plaintexts=plaintexts)
    system.log.append(t_us, "attack_analysis", attack=AttackKind.HARVEST_NOW_DECRYPT_LATER,
                      worst_monobit=worst, plaintext_monobit=plain_dev, control_decrypted=control.detail["decrypted"])
    defended = worst < 0.02 and control.detail["decrypted"]
    return _outcome(AttackKind.HARVEST_NOW_DECRYPT_LATER, defended, worst_monobit=round(worst, 6),
                    plaintext_monobit=round(plain_dev, 6), control_decrypted=control.detail["decrypted"])


def _pick_byzantine(system, scenario: AttackScenario) -> int:
    if "validator" in scenario.params:
        return int(scenario.params["validator"])
    consumers = [v for v in system.registry.active_ids if system.registry.records[v].role is Role.CONSUMER]
    return (consumers or system.registry.active_ids)[-1]


def _double_sign(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    byz = _pick_byzantine(system, scenario)
    reg = system.registry
    result = system.committee.run_height(0, [b"double-sign-probe"], faults={byz: FaultKind.EQUIVOCATE},
                                         start=t_us / 1e6)
    evidence = [e for e in detect_equivocation(system.committee.observed_votes) if e.accused == byz]
    for ev in evidence:
        reg.handle_evidence(ev)
    slashed = reg.records[byz].status is Status.SLASHED
    system.log.append(t_us, "attack_slash", attack=AttackKind.DOUBLE_SIGN, accused=byz, evidence=len(evidence),
                      status=reg.records[byz].status, finalized=result.certificate is not None)
    safe = len(result.certified_digests) <= 1
    return _outcome(AttackKind.DOUBLE_SIGN, slashed and safe, accused=byz, evidence=len(evidence),
                    certified_digests=len(result.certified_digests))


def _qkd_dos(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    reg, log = system.registry, system.log
    hubs = reg.hubs
    target = int(scenario.params.get("hub", hubs[0] if hubs else 0))
    t = t_us / 1e6
    before = system.committee.run_height(0, [b"dos-before"], start=t)
    t += before.latency_s
    severed = [lid for lid, link in sorted(system.links.items()) if target in lid]
    for lid in severed:
        system.links[lid].alive = False
    log.append(t_us, "attack_sever", attack=AttackKind.QKD_DOS, hub=target, links=[list(x) for x in severed])
    missed_before = system.transport.missed
    after = system.committee.run_height(1, [b"dos-after"], start=t)
    delivery_log = [("unreachable", target)] if system.transport.missed > missed_before else []
    if delivery_log and reg.records[target].role is Role.QKD_HUB:
        try:
            reg.handle_evidence(MisbehaviorEvidence(EvidenceKind.CONNECTIVITY_FAILURE, target, ("unreachable", target)),
                                delivery_log)
        except InvalidEvidence:
            pass
    redundant = any(h != target for h in hubs)
    continued = before.certificate is not None and after.certificate is not None
    defended = continued and not reg.unserved
    log.append(t_us, "attack_result", attack=AttackKind.QKD_DOS, continued=continued,
               reassigned=dict(reg.hub_assignments), unserved=sorted(reg.unserved))
    out = _outcome(AttackKind.QKD_DOS, defended, hub=target, redundant_hub=redundant, continued=continued,
                   unserved=sorted(reg.unserved), rerouted_messages=system.transport.hop_messages)
    if not defended and not redundant:
        out.label = Label.TOPOLOGY_VIOLATION
    return out


def collusion_forge(colluders: set[int], fake_event: chains.LockEvent | None = None, system=None, *,
                    research_mode: bool = False, t_us: int = 0) -> AttackOutcome:
    """Colluders sign a fabricated lock; the contract must refuse it below threshold."""
    if system is None:
        from .sim.experiments import build_system
        from .sim.config import default_bridge_config
        system = build_system(default_bridge_config())
    kind = AttackKind.MINORITY_COLLUSION
    n = len(system.registry.active_ids)
    if len(colluders) > max_faults(n) and not research_mode:
        raise InvalidScenario(f"{len(colluders)} colluders exceed f={max_faults(n)} for n={n}; "
                              "only allowed in research mode")
    event = fake_event or fabricated_event(system)
    message = chains.mint_message(system.dest.chain_id, event)
    sigs = [system.enclave.sign(system.handles[v], message, system.registry) for v in sorted(colluders)]
    proof = custody.aggregate_proof(message, sigs)
    res = chains.contract_mint(system.dst_contract, event, proof)
    system.log.append(t_us, "attack_mint", attack=kind, colluders=sorted(colluders), outcome=res.outcome,
                      threshold=system.dst_contract.current_threshold())
    out = _outcome(kind, not res.ok, colluders=sorted(colluders), contract_outcome=res.outcome.value,
                   threshold=system.dst_contract.current_threshold())
    if research_mode and len(colluders) > max_faults(n):
        out.label = Label.EXPECTED_BREACH if res.ok else Label.DEFENDED
    return out


def _collusion(system, scenario: AttackScenario, t_us: int) -> AttackOutcome:
    n = len(system.registry.active_ids)
    colluders = set(scenario.params.get("colluders", system.registry.active_ids[-max_faults(n):] if max_faults(n) else []))
    return collusion_forge(colluders, system=system, research_mode=scenario.research_mode, t_us=t_us)


SCRIPTS: dict[AttackKind, Callable[[Any, AttackScenario, int], AttackOutcome]] = {
    AttackKind.KEY_THEFT: _key_theft,
    AttackKind.PROOF_FORGERY: _proof_forgery,
    AttackKind.REPLAY: _replay,
    AttackKind.HARVEST_NOW_DECRYPT_LATER: _harvest,
    AttackKind.DOUBLE_SIGN: _double_sign,
    AttackKind.QKD_DOS: _qkd_dos,
    AttackKind.MINORITY_COLLUSION: _collusion,
}


def run_attack(scenario: AttackScenario, system, at_s: float = 1.0) -> AttackOutcome:
    """Schedule the attack script on the system's event loop and run it."""
    box: list[AttackOutcome] = []
    start = len(system.log.records)
    at_us = max(system.sim.now_us, int(round(at_s * 1e6)))

    def fire(t_us: int) -> None:
        system.log.append(t_us, "attack_start", attack=scenario.kind, params=scenario.params,
                          research_mode=scenario.research_mode)
        out = SCRIPTS[scenario.kind](system, scenario, t_us)
        system.log.append(t_us, "attack_end", attack=scenario.kind, defended=out.defended,
                          mechanism=out.mechanism, label=out.label)
        box.append(out)

    system.sim.schedule(at_us, fire)
    system.sim.run(at_us)
    outcome = box[0]
    outcome.trace = system.log.records[start:]
    return outcome


def run_attack_suite(config=None, kinds: list[AttackKind] | None = None) -> list[AttackOutcome]:
    """Every attack kind against a fresh system built from ``config``."""
    from .sim.config import default_bridge_config
    from .sim.experiments import build_system

    config = config or default_bridge_config()
    kinds = kinds or [AttackKind(k) for k in config.attacks] or list(AttackKind)
    outcomes = []
    for kind in kinds:
        system = build_system(config)
        outcomes.append(run_attack(AttackScenario(kind, research_mode=config.research_mode), system))
    return outcomes

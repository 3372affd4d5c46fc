"""Experiment drivers: key-rate runs, the end-to-end bridge scenario and
committee-size sweeps, all on the deterministic event loop."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable

from .. import chains, custody
from ..consensus import Committee, ConsensusConfig, RoundResult, Transport
from ..custody import AggregatedProof, Enclave, SignatureScheme
from ..errors import InsufficientKey
from ..qkd import (
    MAC_KEY_BITS,
    Bits,
    ChannelFit,
    QkdLink,
    QkdLinkConfig,
    fit_channel_params,
    sustainability_check,
    traffic_demand,
)
from ..registry import QuorumMode, Registry, Role, ValidatorRecord
from .config import CALIBRATION_POINTS, LinkSpec, ScenarioConfig, default_bridge_config, full_mesh
from .engine import US, EventLog, Simulation, to_us
from .metrics import Metrics


def calibrated_fit() -> ChannelFit:
    return fit_channel_params(CALIBRATION_POINTS)


def make_link(spec: LinkSpec, seed: int, start_delay_s: float, fit: ChannelFit | None = None) -> QkdLink:
    fit = fit or calibrated_fit()
    cfg = QkdLinkConfig(
        spec.endpoint_a, spec.endpoint_b, spec.distance_km,
        spec.base_rate_r0 if spec.base_rate_r0 is not None else fit.r0,
        spec.attenuation_lambda if spec.attenuation_lambda is not None else fit.attenuation,
        spec.buffer_capacity,
    )
    return QkdLink(cfg, seed, start_delay_s)


class TrafficStream:
    """Fixed-size packets every ``interval_us``, each OTP-sealed and opened at the far end."""

    def __init__(self, sim: Simulation, link: QkdLink, interval_us: int, packet_bits: int, rng: random.Random,
                 log_packets: bool = True, window_us: int = 60 * US):
        self.sim = sim
        self.link = link
        self.interval_us = interval_us
        self.packet_bits = packet_bits
        self.rng = rng
        self.log_packets = log_packets
        self.window_us = window_us
        self.sent = 0
        self.missed = 0
        self.payload_bits = 0
        self.stopped = False
        self._window = [0, 0]
        self._window_start = 0

    def start(self, until_us: int | None = None) -> None:
        self.until_us = until_us
        self.sim.schedule(self.interval_us, self._send)

    def _send(self, t_us: int) -> None:
        if self.stopped:
            return
        link = self.link
        link.advance_to(t_us / US)
        a, b = link.link_id
        sender = a if self.sent % 2 == 0 else b
        payload = Bits(self.rng.getrandbits(self.packet_bits), self.packet_bits)
        self.sent += 1
        try:
            sealed = link.seal(payload, sender)
            ok = link.open(sealed) == payload
        except InsufficientKey:
            ok = False
        if ok:
            self.payload_bits += self.packet_bits
        else:
            self.missed += 1
        if self.log_packets:
            self.sim.log.append(t_us, "packet" if ok else "missed", link=f"{a}-{b}", sender=sender,
                                offset=sealed.key_offset if ok else None,
                                available=link.buffer.available_bits)
        else:
            self._window[0] += 1
            self._window[1] += 0 if ok else 1
            if t_us - self._window_start >= self.window_us:
                self.sim.log.append(t_us, "traffic_window", link=f"{a}-{b}", packets=self._window[0],
                                    missed=self._window[1], consumed=link.buffer.consumed_total)
                self._window = [0, 0]
                self._window_start = t_us
        nxt = t_us + self.interval_us
        if self.until_us is None or nxt <= self.until_us:
            self.sim.schedule(nxt, self._send)


def _conservation_hook(links: list[QkdLink], violations: list[int]) -> Callable[[int], None]:
    def check(t_us: int) -> None:
        for link in links:
            if not link.buffer.conserved():
                violations.append(t_us)
    return check


def run_keyrate_experiment(distance_km: float, duration_s: float, traffic_kbps: float = 20.0, *,
                           seed: int = 0, fit: ChannelFit | None = None, packet_bits: int = 500,
                           start_delay_s: float = 0.040, log: EventLog | None = None) -> Metrics:
    """Two validators on one link; ``traffic_kbps`` of payload in ``packet_bits`` packets."""
    log = log if log is not None else EventLog()
    sim = Simulation(log)
    link = make_link(LinkSpec(0, 1, distance_km), seed, start_delay_s, fit)
    interval_us = to_us(packet_bits / (traffic_kbps * 1000.0))
    stream = TrafficStream(sim, link, interval_us, packet_bits, random.Random(seed))
    violations: list[int] = []
    sim.step_hooks.append(_conservation_hook([link], violations))
    end_us = to_us(duration_s)
    log.append(0, "keyrate_start", distance_km=distance_km, duration_s=duration_s,
               traffic_kbps=traffic_kbps, rate_bps=link.rate, seed=seed)
    stream.start(end_us)
    sim.run(end_us)
    link.advance_to(duration_s)

    buf = link.buffer
    m = Metrics(
        label=f"keyrate-{distance_km:g}km",
        distance_km=distance_km,
        duration_s=duration_s,
        key_rate_bps=link.rate,
        bits_generated=buf.generated_total,
        bits_consumed=stream.payload_bits,
        mac_key_bits=buf.consumed_total - stream.payload_bits,
        missed_packets=stream.missed,
        packets_sent=stream.sent,
        sustainable=sustainability_check(link.rate, traffic_demand(traffic_kbps * 1000.0, packet_bits)),
        extra={"conservation_violations": len(violations), "overflow_discarded": buf.overflow_discarded,
               "ranges_disjoint": buf.ranges_disjoint()},
    ).finish()
    log.append(end_us, "keyrate_end", bits_generated=m.bits_generated, bits_consumed=m.bits_consumed,
               missed=m.missed_packets, surplus=m.surplus_ratio)
    return m


@dataclass
class BridgeSystem:
    config: ScenarioConfig
    sim: Simulation
    registry: Registry
    enclave: Enclave
    handles: dict
    links: dict
    transport: Transport
    committee: Committee
    source: chains.HeaderChain
    dest: chains.FinalityChain
    src_contract: chains.BridgeContract
    dst_contract: chains.BridgeContract
    streams: list[TrafficStream] = field(default_factory=list)
    conservation_violations: list[int] = field(default_factory=list)

    @property
    def log(self) -> EventLog:
        return self.sim.log

    def threshold(self) -> int:
        return self.committee.threshold()

    def sealed_messages(self) -> int:
        return sum(link.sealed for link in self.links.values())


def build_system(config: ScenarioConfig, log: EventLog | None = None, fit: ChannelFit | None = None,
                 scheme: SignatureScheme | None = None) -> BridgeSystem:
    sim = Simulation(log if log is not None else EventLog())
    scheme = scheme or SignatureScheme(signature_size=config.signature_size)
    enclave = Enclave(scheme, seed=config.seed, sign_cost_s=config.sign_cost_s)
    registry = Registry(QuorumMode(config.quorum_mode), config.cert_allowlist)
    specs = config.validators or [v for v in default_bridge_config(committee_n=config.committee_n).validators]
    handles = {}
    for spec in specs:
        handle, pk = enclave.keygen(spec.id)
        handles[spec.id] = handle
        registry.register(ValidatorRecord(spec.id, pk, spec.weight, Role(spec.role), spec.certificate))
    hubs = registry.hubs
    for v in registry.active_ids:
        if hubs and v not in hubs:
            registry.assign_hub(v, hubs[0])

    links = {}
    for spec in config.links:
        link = make_link(spec, config.seed, config.key_start_delay_s, fit)
        links[link.link_id] = link
    transport = Transport(links, registry)
    consensus_cfg = ConsensusConfig(
        propose_wait_s=config.propose_wait_s, phase_timeout_s=config.phase_timeout_s,
        link_delay_s=config.link_delay_s, seal_cost_s=config.seal_cost_s, max_rounds=config.max_rounds,
        strict_supermajority=config.strict_supermajority,
    )
    committee = Committee(registry, enclave, handles, transport, consensus_cfg,
                          seed=config.seed.to_bytes(8, "big"))
    source = chains.HeaderChain("btc-sim", config.source_block_interval_s)
    dest = chains.FinalityChain("eth-sim", config.dest_block_interval_s, config.dest_finality_lag_s)
    # genesis blocks at t=0
    source.append_block([])
    dest.append_block([])
    system = BridgeSystem(
        config, sim, registry, enclave, handles, links, transport, committee, source, dest,
        chains.BridgeContract(source.chain_id, registry), chains.BridgeContract(dest.chain_id, registry),
    )
    sim.step_hooks.append(_conservation_hook(list(links.values()), system.conservation_violations))
    return system


def start_background_traffic(system: BridgeSystem, until_us: int | None = None, log_packets: bool = False) -> None:
    cfg = system.config
    interval_us = to_us(cfg.packet_interval_s)
    ordered = list(system.links.values())
    for i in cfg.traffic_links:
        if i < len(ordered):
            spec = cfg.links[i]
            link = system.links[(min(spec.endpoint_a, spec.endpoint_b), max(spec.endpoint_a, spec.endpoint_b))]
            stream = TrafficStream(system.sim, link, interval_us, cfg.packet_bits,
                                   random.Random(f"{cfg.seed}:{i}"), log_packets=log_packets)
            system.streams.append(stream)
            stream.start(until_us)


def minimal_bundle(proof: AggregatedProof, registry: Registry, threshold: int) -> AggregatedProof:
    """Smallest prefix (by signer id) of ``proof`` that still meets ``threshold``."""
    chosen: dict = {}
    for signer, sig in sorted(proof.signatures.items()):
        chosen[signer] = sig
        if registry.signer_power(chosen) >= threshold:
            break
    return AggregatedProof(proof.message_digest, chosen)


def log_round(system: BridgeSystem, t_us: int, result: RoundResult) -> None:
    for rec in result.trace:
        rec = dict(rec)
        kind = rec.pop("type")
        system.log.append(t_us, f"consensus_{kind}", **rec)


@dataclass
class BridgeRun:
    metrics: Metrics
    trace: EventLog
    system: BridgeSystem
    round_result: RoundResult | None
    mint: chains.ContractResult | None
    failures: list[str]


def run_bridge_scenario(config: ScenarioConfig | None = None, log: EventLog | None = None,
                        faults: dict | None = None, before_consensus: Callable[[BridgeSystem, float], None] | None = None,
                        system: BridgeSystem | None = None) -> BridgeRun:
    """Lock on the source chain, wait k confirmations, verify, finalize by
    consensus, mint on the destination, and wait for destination finality."""
    config = config or default_bridge_config()
    system = system or build_system(config, log)
    sim = system.sim
    src, dst = system.source, system.dest
    state: dict = {"event": None, "result": None, "mint": None, "mint_block": None, "done_us": None}
    failures: list[str] = []

    event = chains.submit_lock(system.src_contract, src, "alice", config.lock_amount, "alice@eth")
    state["event"] = event
    sim.log.append(0, "lock", event_id=event.event_id, amount=event.amount, expected_height=event.block_height)
    start_background_traffic(system)

    def stop_everything():
        for s in system.streams:
            s.stopped = True

    def mine_source(t_us: int) -> None:
        block = src.append_block(timestamp=t_us / US)
        sim.log.append(t_us, "source_block", height=block.header.height, txs=len(block.txs),
                       root=block.header.merkle_root)
        confirmations = src.tip_height - event.block_height + 1
        if confirmations >= config.k_confirmations and state["result"] is None:
            sim.schedule(t_us, run_consensus)
        else:
            sim.schedule(t_us + to_us(config.source_block_interval_s), mine_source)

    def run_consensus(t_us: int) -> None:
        block = src.blocks[event.block_height]
        proof = chains.merkle_proof(block, event.tx_index)
        verified = {v: chains.verify_lock_event(event, proof, src, config.k_confirmations)
                    for v in system.registry.active_ids}
        sim.log.append(t_us, "spv_verified", validators=sorted(v for v, ok in verified.items() if ok))
        message = chains.mint_message(dst.chain_id, event)
        if before_consensus is not None:
            before_consensus(system, t_us / US)
        result = system.committee.run_height(0, [message], faults=faults, start=t_us / US,
                                             verifier=lambda v, e: verified.get(v, False) and e == message)
        state["result"] = result
        log_round(system, t_us, result)
        if result.certificate is None:
            failures.append(f"consensus:{result.failure.reason.value}")
            sim.log.append(t_us, "bridge_failure", stage="consensus", diagnosis=result.failure.diagnosis)
            stop_everything()
            state["done_us"] = t_us + to_us(result.latency_s)
            return
        bundle = minimal_bundle(result.certificate.event_proofs[custody.digest(message)], system.registry,
                                system.threshold())
        state["bundle"] = bundle
        sim.schedule(t_us + to_us(result.latency_s + config.verify_cost_s * len(bundle)), submit_mint)

    def submit_mint(t_us: int) -> None:
        res = chains.contract_mint(system.dst_contract, event, state["bundle"])
        state["mint"] = res
        sim.log.append(t_us, "mint", outcome=res.outcome.value, amount=res.amount,
                       proof_bytes=state["bundle"].size_bytes, signers=sorted(state["bundle"].signers))
        if not res.ok:
            failures.append(f"mint:{res.outcome.value}")
            stop_everything()
            state["done_us"] = t_us
            return
        dst.pending.append(chains.mint_message(dst.chain_id, event))
        interval = to_us(config.dest_block_interval_s)
        next_block = (t_us // interval + 1) * interval
        sim.schedule(next_block, mine_dest)

    def mine_dest(t_us: int) -> None:
        block = dst.append_block(timestamp=t_us / US)
        state["mint_block"] = block
        sim.log.append(t_us, "dest_block", height=block.header.height, txs=len(block.txs))
        sim.schedule(t_us + to_us(config.dest_finality_lag_s), finalize_dest)

    def finalize_dest(t_us: int) -> None:
        dst.sync_light_client(t_us / US)
        sim.log.append(t_us, "dest_final", finalized_height=dst.light_client.finalized_height)
        state["done_us"] = t_us
        stop_everything()

    sim.schedule(to_us(config.source_block_interval_s), mine_source)
    sim.run()

    links = list(system.links.values())
    end_s = (state["done_us"] or sim.now_us) / US
    for link in links:
        link.advance_to(end_s)
    result: RoundResult | None = state["result"]
    stream_sent = sum(s.sent for s in system.streams)
    stream_missed = sum(s.missed for s in system.streams)
    payload = sum(s.payload_bits for s in system.streams) + system.transport.payload_bits
    key_total = sum(link.buffer.consumed_total for link in links)
    bundle = state.get("bundle")
    crypto = (result.crypto_s if result else 0.0) + (config.verify_cost_s * len(bundle) if bundle else 0.0)

    threshold = system.threshold()
    used = [link for link in links if link.buffer.consumed_total > 0]
    rate_ok = all(sustainability_check(link.rate, link.buffer.consumed_total / end_s) for link in used)
    quorum_ok = bool(result and result.certificate and len(result.certificate.proof) >= threshold
                     and bundle is not None and len(bundle) >= threshold)
    m = Metrics(
        label="bridge",
        duration_s=end_s,
        bits_generated=sum(link.buffer.generated_total for link in links),
        bits_consumed=payload,
        mac_key_bits=key_total - payload,
        missed_packets=stream_missed,
        packets_sent=stream_sent,
        per_round_latency_s=result.latency_s if result else 0.0,
        crypto_overhead_s=crypto,
        end_to_end_latency_s=end_s,
        proof_bundle_bytes=bundle.size_bytes if bundle else 0,
        sustainable=rate_ok,
        extra={
            "threshold": threshold,
            "rounds": result.rounds if result else 0,
            "sealed_messages": system.sealed_messages(),
            "consensus_messages": system.transport.sent,
            "consensus_missed": system.transport.missed,
            "per_signature_cost_s": system.enclave.sign_cost_s,
            "conservation_violations": len(system.conservation_violations),
            "ranges_disjoint": all(link.buffer.ranges_disjoint() for link in links),
            "dual_condition": rate_ok and quorum_ok,
            "minted_total": system.dst_contract.minted_total,
            "locked_total": system.src_contract.locked_total,
        },
    ).finish()
    sim.log.append(state["done_us"] or sim.now_us, "bridge_end", end_to_end_s=end_s, crypto_overhead_s=crypto,
                   proof_bytes=m.proof_bundle_bytes, failures=failures)
    return BridgeRun(m, sim.log, system, result, state["mint"], failures)


@dataclass
class CommitteeRun:
    links: list[Metrics]
    heights: list[RoundResult]
    threshold: int
    per_validator_bps: dict[int, float]

    @property
    def all_finalized(self) -> bool:
        return bool(self.heights) and all(r.certificate is not None for r in self.heights)


def run_committee_experiment(n: int, distances: float | list[float], duration_s: float = 10.0, *,
                             seed: int = 0, traffic_kbps: float = 20.0, log: EventLog | None = None,
                             config: ScenarioConfig | None = None) -> CommitteeRun:
    """Full mesh of ``n`` validators; every link carries the payload stream plus
    consensus traffic, heights are finalized back to back for ``duration_s``."""
    if isinstance(distances, (int, float)):
        links = full_mesh(n, float(distances))
    else:
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
        links = [LinkSpec(a, b, distances[i % len(distances)]) for i, (a, b) in enumerate(pairs)]
    hubs = 1 if n > 1 else 0
    base = default_bridge_config(committee_n=n, hubs=hubs)
    cfg = config or ScenarioConfig(seed=seed, duration_s=duration_s, links=links, committee_n=n,
                                   validators=base.validators, traffic_kbps=traffic_kbps,
                                   traffic_links=list(range(len(links))))
    system = build_system(cfg, log)
    sim = system.sim
    end_us = to_us(cfg.duration_s)
    start_background_traffic(system, end_us)
    heights: list[RoundResult] = []

    def next_height(t_us: int) -> None:
        h = len(heights)
        result = system.committee.run_height(h, [f"committee-event-{h}".encode()], start=t_us / US)
        heights.append(result)
        log_round(system, t_us, result)
        nxt = t_us + max(1, to_us(result.latency_s))
        if nxt < end_us:
            sim.schedule(nxt, next_height)

    sim.schedule(0, next_height)
    sim.run(end_us)
    for link in system.links.values():
        link.advance_to(cfg.duration_s)

    per_link = []
    per_validator: dict[int, float] = {v: 0.0 for v in range(n)}
    stream_by_link = {s.link.link_id: s for s in system.streams}
    for lid, link in sorted(system.links.items()):
        stream = stream_by_link.get(lid)
        demand = link.buffer.consumed_total / cfg.duration_s
        per_validator[lid[0]] += demand
        per_validator[lid[1]] += demand
        payload = stream.payload_bits if stream else 0
        m = Metrics(
            label=f"link-{lid[0]}-{lid[1]}",
            distance_km=link.config.distance_km,
            duration_s=cfg.duration_s,
            key_rate_bps=link.rate,
            bits_generated=link.buffer.generated_total,
            bits_consumed=link.buffer.consumed_total - MAC_KEY_BITS * link.sealed,
            mac_key_bits=MAC_KEY_BITS * link.sealed,
            missed_packets=stream.missed if stream else 0,
            packets_sent=stream.sent if stream else 0,
            sustainable=sustainability_check(link.rate, demand),
            extra={"demand_bps": demand, "payload_stream_bits": payload,
                   "conservation_ok": link.buffer.conserved()},
        ).finish()
        per_link.append(m)
    return CommitteeRun(per_link, heights, system.threshold(), per_validator)


def expected_demand_bps(n: int, traffic_kbps: float = 20.0, packet_bits: int = 500) -> float:
    """A-priori per-validator demand: one payload stream per peer link."""
    return (n - 1) * traffic_demand(traffic_kbps * 1000.0, packet_bits)


def loss_ok(m: Metrics, bound: float = 0.001) -> bool:
    return m.packets_sent > 0 and m.missed_packets / m.packets_sent <= bound + 1e-12


def isclose_rel(a: float, b: float, tol: float) -> bool:
    return math.isclose(a, b, rel_tol=tol)


def run_attack_suite(config: ScenarioConfig | None = None) -> list:
    from ..adversary import run_attack_suite as suite

    return suite(config)


@dataclass
class SafetyReport:
    n: int
    trials: int
    strict: bool
    conflicting: int = 0
    finalized: int = 0
    invalid_certificates: int = 0
    detecting_runs: int = 0
    slashed_runs: int = 0
    missed_equivocators: int = 0

    @property
    def ok(self) -> bool:
        return (self.conflicting == 0 and self.invalid_certificates == 0
                and self.slashed_runs == self.detecting_runs and self.missed_equivocators == 0)


def safety_trial(n: int, rng: random.Random, strict: bool = True,
                 faults: dict | None = None) -> tuple[RoundResult, Committee, dict]:
    """One height with up to f randomly chosen Byzantine validators."""
    from ..consensus import FaultKind
    from ..registry import max_faults

    enclave = Enclave(seed=rng.getrandbits(32), sign_cost_s=0.010)
    registry = Registry()
    handles = {}
    for v in range(n):
        handle, pk = enclave.keygen(v)
        handles[v] = handle
        role, cert = (Role.QKD_HUB, f"cert-{v}") if v == 0 else (Role.CONSUMER, None)
        registry.register(ValidatorRecord(v, pk, 1, role, cert))
    if faults is None:
        byz = rng.sample(range(n), rng.randint(0, max_faults(n)))
        faults = {v: rng.choice(list(FaultKind)) for v in byz}
    committee = Committee(registry, enclave, handles, None,
                          ConsensusConfig(strict_supermajority=strict, max_rounds=3),
                          seed=rng.getrandbits(64).to_bytes(8, "big"))
    events = [f"event-{rng.getrandbits(32)}".encode() for _ in range(rng.randint(1, 3))]
    return committee.run_height(rng.randint(0, 10**6), events, faults), committee, faults


def run_safety_trials(n: int, trials: int = 1000, seed: int = 0, strict: bool = True) -> SafetyReport:
    from ..consensus import FaultKind, detect_equivocation
    from ..registry import Status

    report = SafetyReport(n, trials, strict)
    for i in range(trials):
        rng = random.Random(f"safety:{seed}:{n}:{i}")
        result, committee, faults = safety_trial(n, rng, strict)
        reg = committee.registry
        T = committee.threshold()
        report.conflicting += len(result.certified_digests) > 1
        if result.certificate is not None:
            report.finalized += 1
            report.invalid_certificates += not result.certificate.verify(reg, T)
        evidence = detect_equivocation(committee.observed_votes)
        accused = {e.accused for e in evidence}
        for e in evidence:
            reg.handle_evidence(e)
        if evidence:
            report.detecting_runs += 1
            report.slashed_runs += all(reg.records[v].status is Status.SLASHED for v in accused)
        equivocators = {v for v, k in faults.items() if k is FaultKind.EQUIVOCATE}
        report.missed_equivocators += len(equivocators - accused)
    return report

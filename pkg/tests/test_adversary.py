import itertools
import random
from collections import Counter

import pytest

from qlink.adversary import (
    MECHANISM,
    SCRIPTS,
    THREAT_CATEGORY,
    AttackKind,
    AttackScenario,
    Label,
    Mechanism,
    collusion_forge,
    fabricated_event,
    harvest_then_decrypt,
    monobit_deviation,
    run_attack,
    run_attack_suite,
)
from qlink.chains import Outcome
from qlink.custody import SignatureScheme
from qlink.errors import InvalidScenario
from qlink.qkd import Bits, KeyBlock, new_buffer, otp_seal, tick_generate
from qlink.sim.config import default_bridge_config
from qlink.sim.experiments import build_system


def system(**kw):
    return build_system(default_bridge_config(**kw))


def test_totality():
    assert set(SCRIPTS) == set(AttackKind) == set(MECHANISM) == set(THREAT_CATEGORY)


def test_default_suite_all_defended():
    outcomes = run_attack_suite()
    assert [o.kind for o in outcomes] == list(AttackKind)
    for o in outcomes:
        assert o.defended, o.summary()
        assert isinstance(o.mechanism, Mechanism) and o.mechanism is MECHANISM[o.kind]
        assert o.label is Label.DEFENDED
        assert o.trace and o.trace[0]["type"] == "attack_start" and o.trace[-1]["type"] == "attack_end"


@pytest.mark.parametrize("kind,code", [
    (AttackKind.KEY_THEFT, "KeyExportForbidden"),
    (AttackKind.REPLAY, "RejectReplay"),
    (AttackKind.QKD_DOS, "HubReroute"),
    (AttackKind.MINORITY_COLLUSION, "RejectThreshold"),
])
def test_mechanism_codes(kind, code):
    out = run_attack(AttackScenario(kind), system())
    assert out.defended and out.mechanism.value == code


def test_replay_detail():
    out = run_attack(AttackScenario(AttackKind.REPLAY), system())
    assert out.detail == {"first": "OK", "replay": "RejectReplay", "minted_total": 100}


def test_qkd_dos_reroutes_consumers():
    s = system()
    out = run_attack(AttackScenario(AttackKind.QKD_DOS), s)
    assert out.defended and out.detail["continued"]
    assert set(s.registry.hub_assignments.values()) == {1}


def test_qkd_dos_without_redundant_hub():
    out = run_attack(AttackScenario(AttackKind.QKD_DOS), system(hubs=1))
    assert not out.defended
    assert out.label is Label.TOPOLOGY_VIOLATION


def test_forgery_succeeds_only_against_classical_keys():
    pqc = run_attack(AttackScenario(AttackKind.PROOF_FORGERY), system())
    assert pqc.defended and pqc.detail["contract_outcome"] == "RejectSignature"
    classical = build_system(default_bridge_config(), scheme=SignatureScheme(classical=True))
    broken = run_attack(AttackScenario(AttackKind.PROOF_FORGERY), classical)
    assert not broken.defended and broken.detail["contract_outcome"] == "OK"


class TestCollusion:
    def test_n4_one(self):
        out = collusion_forge({3}, system=system())
        assert out.defended and out.detail["contract_outcome"] == Outcome.REJECT_THRESHOLD.value

    def test_n7_two(self):
        out = collusion_forge({5, 6}, system=system(committee_n=7))
        assert out.defended and out.detail["threshold"] == 5

    def test_exceeding_f_requires_research_mode(self):
        with pytest.raises(InvalidScenario):
            collusion_forge({1, 2, 3}, system=system())

    def test_research_mode_breach_is_labelled(self):
        out = collusion_forge({1, 2, 3}, system=system(), research_mode=True)
        assert not out.defended and out.label is Label.EXPECTED_BREACH
        assert not out.counts_toward_acceptance

    def test_monotone_trust_boundary(self):
        for n in range(1, 7):
            s = system(committee_n=n, hubs=min(2, n))
            T = s.dst_contract.current_threshold()
            for i, colluders in enumerate(c for r in range(n + 1) for c in itertools.combinations(range(n), r)):
                out = collusion_forge(set(colluders), fabricated_event(s, nonce=10_000 + i), s, research_mode=True)
                assert (not out.defended) == (len(colluders) >= T), (n, colluders)


class TestHarvest:
    def test_perfect_secrecy_exhaustive(self):
        # 8-bit messages: the ciphertext distribution is identical for m0 and m1
        m0, m1 = 0b10100000, 0b00000001
        dist = [Counter(m ^ pad for pad in range(256)) for m in (m0, m1)]
        assert dist[0] == dist[1]
        c = 0x5A
        assert {c ^ m0, c ^ m1} <= set(range(256))

    def seal_many(self, plaintexts, seed=3):
        buf = new_buffer(10**7, seed, "h")
        tick_generate(buf, 10**7, 1.0)
        msgs = [otp_seal(p, buf) for p in plaintexts]
        pads = [KeyBlock(m.key_offset, buf.stream.bits(m.key_offset, 500), 500) for m in msgs]
        return msgs, pads

    def test_monobit_on_biased_plaintext(self):
        plain = [Bits(0, 500)] * 200
        assert monobit_deviation(0, 100_000) == 0.5
        msgs, _ = self.seal_many(plain)
        out = harvest_then_decrypt(msgs, candidates=[Bits((1 << 500) - 1, 500)] * 200)
        assert out.defended and out.detail["bits"] == 100_000
        assert out.detail["monobit_deviation"] < 0.02

    def test_control_with_pad(self):
        rng = random.Random(1)
        plain = [Bits(rng.getrandbits(500), 500) for _ in range(200)]
        msgs, pads = self.seal_many(plain)
        ctrl = harvest_then_decrypt(msgs, disclosed_keys=pads, true_plaintexts=plain)
        assert ctrl.label is Label.CONTROL and ctrl.detail["decrypted"] and not ctrl.defended

    def test_scripted_attack(self):
        out = run_attack(AttackScenario(AttackKind.HARVEST_NOW_DECRYPT_LATER), system())
        assert out.defended
        assert out.detail["plaintext_monobit"] > 0.05 > out.detail["worst_monobit"]
        assert out.detail["control_decrypted"]


def test_double_sign_slashes_equivocator():
    s = system(committee_n=7)
    out = run_attack(AttackScenario(AttackKind.DOUBLE_SIGN), s)
    assert out.defended and out.detail["certified_digests"] <= 1
    assert s.registry.records[out.detail["accused"]].status.value == "SLASHED"


def test_attack_trace_inside_event_loop():
    s = system()
    run_attack(AttackScenario(AttackKind.KEY_THEFT), s, at_s=2.5)
    times = [r["t_us"] for r in s.log.records]
    assert times == sorted(times) and times[0] == 2_500_000

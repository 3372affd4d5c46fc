import itertools
import random
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import STATES, exhaustive_check, expected_cases
from qlink.consensus import Phase, Proposal, cast_vote
from qlink.custody import Signature
from qlink.errors import CertificateRequired, DuplicateKey, EmptyRegistry, InvalidEvidence, InvalidParameter
from qlink.registry import (
    EvidenceKind,
    MisbehaviorEvidence,
    QuorumMode,
    Registry,
    Role,
    Status,
    ValidatorRecord,
    max_faults,
)



def pk(i):
    return bytes([i]) * 32


class TestRegister:
    def test_consumer_without_certificate(self):
        reg = Registry().register(ValidatorRecord(0, pk(0)))
        assert reg.total_weight == 1

    @pytest.mark.parametrize("role", [Role.QKD_HUB, Role.QKD_ENDPOINT])
    def test_qkd_role_needs_certificate(self, role):
        with pytest.raises(CertificateRequired):
            ValidatorRecord(0, pk(0), role=role)

    def test_allowlist(self):
        reg = Registry(cert_allowlist={"vendor-a"})
        reg.register(ValidatorRecord(0, pk(0), role=Role.QKD_HUB, certificate="vendor-a"))
        with pytest.raises(CertificateRequired):
            reg.register(ValidatorRecord(1, pk(1), role=Role.QKD_HUB, certificate="vendor-x"))

    def test_duplicate_public_key(self):
        reg = Registry().register(ValidatorRecord(0, pk(0)))
        with pytest.raises(DuplicateKey):
            reg.register(ValidatorRecord(1, pk(0)))

    def test_duplicate_id(self):
        reg = Registry().register(ValidatorRecord(0, pk(0)))
        with pytest.raises(DuplicateKey):
            reg.register(ValidatorRecord(0, pk(1)))

    def test_weight_positive(self):
        with pytest.raises(InvalidParameter):
            ValidatorRecord(0, pk(0), weight=0)

    def test_total_weight_counts_active_only(self):
        reg = Registry()
        for i, w in enumerate([3, 5, 2]):
            reg.register(ValidatorRecord(i, pk(i), weight=w))
        reg.records[1].status = Status.SLASHED
        assert reg.total_weight == 5


def registry(n, weights=None, mode=QuorumMode.COUNT_2F1):
    reg = Registry(mode)
    for i in range(n):
        reg.register(ValidatorRecord(i, pk(i), weight=(weights[i] if weights else 1)))
    return reg


class TestThreshold:
    def test_n4_count(self):
        assert registry(4).quorum_threshold() == 3

    def test_w4_weight(self):
        assert registry(4, mode=QuorumMode.WEIGHT_SUPERMAJORITY).quorum_threshold() == 3

    def test_n1(self):
        assert registry(1).quorum_threshold() == 1

    def test_empty(self):
        with pytest.raises(EmptyRegistry):
            Registry().quorum_threshold()

    @pytest.mark.parametrize("n,f", [(1, 0), (4, 1), (7, 2), (8, 2), (9, 2), (10, 3)])
    def test_max_faults(self, n, f):
        assert max_faults(n) == f

    def test_max_faults_invalid(self):
        with pytest.raises(InvalidParameter):
            max_faults(0)

    @pytest.mark.parametrize("n,plain,strict", [(4, 3, 3), (7, 5, 5), (8, 5, 6), (9, 5, 7)])
    def test_finality_threshold(self, n, plain, strict):
        reg = registry(n)
        assert reg.finality_threshold(strict=False) == plain
        assert reg.finality_threshold() == strict

    @given(st.lists(st.integers(1, 20), min_size=1, max_size=8))
    def test_weight_threshold_is_smallest_above_two_thirds(self, weights):
        reg = registry(len(weights), weights, QuorumMode.WEIGHT_SUPERMAJORITY)
        W = sum(weights)
        T = reg.quorum_threshold()
        assert 3 * T > 2 * W and 3 * (T - 1) <= 2 * W


class TestQuorumMet:
    def test_three_of_four(self):
        assert registry(4).quorum_met({0, 1, 2})

    def test_slashed_contributes_zero(self):
        reg = registry(4)
        reg.records[2].status = Status.SLASHED
        # three active remain: T=2f+1 with f=0 is 1, but the signer count is what is checked here
        assert reg.signer_power({0, 1, 2}) == 2
        assert not reg.quorum_met({0, 1, 2}, threshold=3)

    def test_empty_set(self):
        assert not registry(4).quorum_met(set())

    @given(st.lists(st.integers(1, 9), min_size=1, max_size=6), st.data())
    def test_weight_quorums_intersect(self, weights, data):
        reg = registry(len(weights), weights, QuorumMode.WEIGHT_SUPERMAJORITY)
        T = reg.quorum_threshold()
        ids = range(len(weights))
        quorums = [set(s) for r in range(len(weights) + 1) for s in itertools.combinations(ids, r)
                   if reg.quorum_met(s)]
        for a, b in itertools.combinations(quorums, 2):
            assert a & b


class TestEvidence:
    def votes(self, c, v, height=1, rnd=0):
        p1 = Proposal(height, rnd, 0, (b"a",))
        p2 = Proposal(height, rnd, 0, (b"b",))
        return (cast_vote(v, Phase.PREVOTE, p1, c.enclave, c.handles[v]),
                cast_vote(v, Phase.PREVOTE, p2, c.enclave, c.handles[v]))

    def test_double_sign_slashes(self, committee4):
        reg = committee4.registry
        reg.handle_evidence(MisbehaviorEvidence(EvidenceKind.DOUBLE_SIGN, 2, self.votes(committee4, 2)))
        assert reg.records[2].status is Status.SLASHED
        assert 2 not in reg.active_ids
        assert not reg.quorum_met({1, 2, 3}, threshold=3)

    def test_forged_second_signature(self, committee4):
        a, b = self.votes(committee4, 2)
        forged = type(b)(b.phase, b.height, b.round, b.proposal_digest, b.signer,
                         Signature(2, bytes(1300), b.signature.scheme_id, b.signature.message_digest))
        with pytest.raises(InvalidEvidence):
            committee4.registry.handle_evidence(MisbehaviorEvidence(EvidenceKind.DOUBLE_SIGN, 2, (a, forged)))
        assert committee4.registry.records[2].status is Status.ACTIVE

    def test_non_conflicting_votes(self, committee4):
        a, _ = self.votes(committee4, 2)
        with pytest.raises(InvalidEvidence):
            committee4.registry.handle_evidence(MisbehaviorEvidence(EvidenceKind.DOUBLE_SIGN, 2, (a, a)))

    def test_different_rounds_not_double_sign(self, committee4):
        a, _ = self.votes(committee4, 2, rnd=0)
        _, b = self.votes(committee4, 2, rnd=1)
        with pytest.raises(InvalidEvidence):
            committee4.registry.handle_evidence(MisbehaviorEvidence(EvidenceKind.DOUBLE_SIGN, 2, (a, b)))

    def test_idempotent(self, committee4):
        reg = committee4.registry
        ev = MisbehaviorEvidence(EvidenceKind.DOUBLE_SIGN, 3, self.votes(committee4, 3))
        reg.handle_evidence(ev)
        once = reg.state()
        reg.handle_evidence(ev)
        assert reg.state() == once

    def test_hub_key_delivery_failure_reroutes(self, make_committee):
        c = make_committee(5, hubs=2)
        reg = c.registry
        for v in (2, 3, 4):
            reg.assign_hub(v, 0)
        entry = ("undelivered", 0, 17)
        reg.handle_evidence(MisbehaviorEvidence(EvidenceKind.KEY_DELIVERY_FAILURE, 0, entry), [entry])
        assert reg.records[0].status is Status.DISQUALIFIED
        assert reg.hub_assignments == {2: 1, 3: 1, 4: 1}
        assert not reg.unserved

    def test_last_hub_leaves_consumers_unserved(self, make_committee):
        c = make_committee(3, hubs=1)
        reg = c.registry
        reg.assign_hub(1, 0)
        entry = ("down", 0)
        reg.handle_evidence(MisbehaviorEvidence(EvidenceKind.CONNECTIVITY_FAILURE, 0, entry), [entry])
        assert reg.unserved == {1}

    def test_delivery_evidence_needs_log_entry(self, committee4):
        with pytest.raises(InvalidEvidence):
            committee4.registry.handle_evidence(
                MisbehaviorEvidence(EvidenceKind.KEY_DELIVERY_FAILURE, 0, ("x",)), [])

    def test_consumer_cannot_fail_key_delivery(self, committee4):
        with pytest.raises(InvalidEvidence):
            committee4.registry.handle_evidence(
                MisbehaviorEvidence(EvidenceKind.KEY_DELIVERY_FAILURE, 3, "e"), ["e"])

    def test_rewards_counter(self):
        reg = registry(4)
        reg.reward_round({0, 1, 2})
        reg.reward_round({1})
        assert reg.rewards == {0: 1, 1: 2, 2: 1}


# -- brute-force oracle equivalence ----------------------------------------------


def test_oracle_equivalence_all_small_registries(make_committee):
    start = time.perf_counter()
    mismatches, cases = exhaustive_check(make_committee)
    assert mismatches == []
    assert cases == expected_cases(6)
    assert time.perf_counter() - start < 30


def test_non_active_only_never_quorum():
    rng = random.Random(4)
    for _ in range(200):
        n = rng.randint(1, 6)
        reg = registry(n)
        for r in reg.records.values():
            r.status = rng.choice(STATES)
        inactive = [v for v in range(n) if not reg.is_active(v)]
        assert not reg.quorum_met(inactive, threshold=1)

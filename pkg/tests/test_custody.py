import copy
import pickle
import random
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlink import custody
from qlink.custody import (
    AggregatedProof,
    Enclave,
    KeyHandle,
    Reason,
    SchemeId,
    Signature,
    SignatureScheme,
    aggregate_proof,
    quantum_forge,
    verify,
    verify_aggregate,
)
from qlink.errors import AuthorizationDenied, DigestMismatch, KeyExportForbidden, NoSuchKey
from qlink.registry import EvidenceKind, MisbehaviorEvidence, Status

MSG = b"mint 100 to alice"


class TestEnclave:
    def test_keygen_twice_distinct(self):
        enc = Enclave()
        (h1, pk1), (h2, pk2) = enc.keygen(0), enc.keygen(0)
        assert h1 != h2 and pk1 != pk2

    def test_deterministic_public_keys(self):
        a = [Enclave(seed=11).keygen(v)[1] for v in range(3)]
        b = [Enclave(seed=11).keygen(v)[1] for v in range(3)]
        assert a == b
        assert Enclave(seed=12).keygen(0)[1] != a[0]

    @pytest.mark.parametrize("probe", [
        lambda e, h: e.export_secret(h),
        lambda e, h: pickle.dumps(e),
        lambda e, h: copy.deepcopy(e),
        lambda e, h: copy.copy(e),
    ])
    def test_secret_never_leaves(self, probe):
        enc = Enclave()
        h, _ = enc.keygen(0)
        with pytest.raises(KeyExportForbidden):
            probe(enc, h)

    def test_public_surface_holds_no_secret(self):
        enc = Enclave(seed=5)
        h, pk = enc.keygen(0)
        enc.sign(h, MSG)
        public = {k: v for k, v in vars(enc).items() if not k.startswith("_")}
        blobs = [v for v in public.values() if isinstance(v, (bytes, bytearray))]
        assert blobs == []
        for rec in enc.signing_log:
            assert set(vars(rec)) == {"owner", "message_digest", "context", "signature"}

    def test_sign_then_verify(self):
        enc = Enclave()
        h, pk = enc.keygen(0)
        sig = enc.sign(h, MSG)
        assert verify(pk, MSG, sig)
        assert len(sig.data) == 1300
        assert enc.signing_log[-1].owner == 0

    def test_unknown_handle(self):
        with pytest.raises(NoSuchKey):
            Enclave().sign(KeyHandle("nope", 0), MSG)

    def test_handle_from_other_enclave(self):
        h, _ = Enclave().keygen(0)
        with pytest.raises(NoSuchKey):
            Enclave(seed=1).sign(h, MSG)

    def test_slashed_owner_denied(self, committee4):
        reg = committee4.registry
        reg.records[2].status = Status.SLASHED
        with pytest.raises(AuthorizationDenied):
            committee4.enclave.sign(committee4.handles[2], MSG, reg)

    def test_signing_cost_accounted(self):
        enc = Enclave(sign_cost_s=0.010)
        h, _ = enc.keygen(0)
        for _ in range(3):
            enc.sign(h, MSG)
        assert enc.sign_cost_s <= 0.010
        assert enc.signing_time_s == pytest.approx(0.030)


class TestVerify:
    def test_wrong_message(self):
        enc = Enclave()
        h, pk = enc.keygen(0)
        assert not verify(pk, MSG + b"!", enc.sign(h, MSG))

    def test_wrong_key(self):
        enc = Enclave()
        h, _ = enc.keygen(0)
        _, other = enc.keygen(1)
        assert not verify(other, MSG, enc.sign(h, MSG))

    @pytest.mark.parametrize("bad", [None, "sig", Signature(0, b"", SchemeId.MOCK_DETERMINISTIC, b""),
                                     Signature(0, b"\x00" * 1299, SchemeId.MOCK_DETERMINISTIC, b"")])
    def test_malformed_is_false(self, bad):
        _, pk = Enclave().keygen(0)
        assert verify(pk, MSG, bad) is False

    def test_unforgeable_fuzz(self):
        enc = Enclave(seed=3)
        _, pk = enc.keygen(0)
        rng = random.Random(2024)
        hits = 0
        for i in range(100_000):
            data = rng.randbytes(1300)
            hits += verify(pk, MSG, Signature(0, data, SchemeId.MOCK_DETERMINISTIC, custody.digest(MSG)))
        assert hits == 0

    def test_quantum_forge_only_breaks_classical(self):
        pqc = Enclave(seed=1)
        _, pk = pqc.keygen(0)
        assert quantum_forge(pk, 0, MSG) is None
        classical = Enclave(SignatureScheme(classical=True), seed=1)
        _, cpk = classical.keygen(0)
        assert verify(cpk, MSG, quantum_forge(cpk, 0, MSG))

    def test_lattice_provider(self):
        pytest.importorskip("dilithium_py")
        enc = Enclave(SignatureScheme.ml_dsa_44())
        h, pk = enc.keygen(0)
        sig = enc.sign(h, MSG)
        assert verify(pk, MSG, sig) and not verify(pk, b"x", sig)
        assert len(sig.data) == 2420


class TestAggregate:
    def test_three_sigs_size(self, committee4):
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in range(3)])
        assert proof.size_bytes == 4 + 3 * (8 + 2 + 1300) == 3934
        assert 3 * 1024 <= proof.size_bytes <= 6 * 1024
        assert len(proof.serialize()) == proof.size_bytes

    def test_duplicate_signer_collapses(self, committee4):
        s = committee4.sign(1, MSG)
        assert len(aggregate_proof(MSG, [s, s, committee4.sign(1, MSG)])) == 1

    def test_empty(self, committee4):
        proof = aggregate_proof(MSG, [])
        assert len(proof) == 0 and proof.size_bytes == 4
        assert verify_aggregate(proof, MSG, committee4.registry, 3).reason is Reason.THRESHOLD_NOT_MET

    def test_mixed_digests(self, committee4):
        with pytest.raises(DigestMismatch):
            aggregate_proof(MSG, [committee4.sign(0, MSG), committee4.sign(1, b"other")])

    def test_serialization_golden_layout(self, committee4):
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in (2, 0)])
        blob = proof.serialize()
        assert blob[:4] == struct.pack(">I", 2)
        assert blob[4:14] == struct.pack(">QH", 0, 1300)
        assert blob[14:1314] == proof.signatures[0].data
        back = AggregatedProof.deserialize(blob, proof.message_digest)
        assert back == proof

    @pytest.mark.parametrize("size", [666, 1300, 2420])
    def test_size_configurable(self, make_committee, size):
        c = make_committee(4, scheme=SignatureScheme(signature_size=size))
        proof = aggregate_proof(MSG, [c.sign(v, MSG) for v in range(3)])
        assert proof.size_bytes == 4 + 3 * (10 + size)

    @given(st.lists(st.integers(0, 3), max_size=12))
    def test_no_duplicate_signers(self, signers):
        from conftest import Committee
        c = Committee(4)
        proof = aggregate_proof(MSG, [c.sign(v, MSG) for v in signers])
        assert sorted(proof.signers) == sorted(set(signers))
        assert list(proof.signatures) == sorted(set(signers))


class TestVerifyAggregate:
    def test_accept(self, committee4):
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in range(3)])
        assert verify_aggregate(proof, MSG, committee4.registry, 3)

    def test_below_threshold(self, committee4):
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in range(2)])
        assert verify_aggregate(proof, MSG, committee4.registry, 3).reason is Reason.THRESHOLD_NOT_MET

    def test_unregistered_signer(self, committee4):
        outsider = Enclave(seed=99)
        h, _ = outsider.keygen(7)
        sigs = [committee4.sign(v, MSG) for v in range(2)] + [outsider.sign(h, MSG)]
        verdict = verify_aggregate(aggregate_proof(MSG, sigs), MSG, committee4.registry, 3)
        assert not verdict and verdict.reason is Reason.UNREGISTERED_SIGNER

    def test_inactive_signer(self, committee4):
        committee4.registry.records[1].status = Status.DISQUALIFIED
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in range(3)])
        assert verify_aggregate(proof, MSG, committee4.registry, 3).reason is Reason.INACTIVE_SIGNER

    def test_bad_signature(self, committee4):
        sigs = [committee4.sign(v, MSG) for v in range(3)]
        s = sigs[0]
        sigs[0] = Signature(s.signer, bytes([s.data[0] ^ 1]) + s.data[1:], s.scheme_id, s.message_digest)
        assert verify_aggregate(aggregate_proof(MSG, sigs), MSG, committee4.registry, 3).reason is Reason.BAD_SIGNATURE

    def test_signature_under_another_id(self, committee4):
        s = committee4.sign(0, MSG)
        proof = AggregatedProof(s.message_digest, {1: s, 2: committee4.sign(2, MSG), 3: committee4.sign(3, MSG)})
        assert verify_aggregate(proof, MSG, committee4.registry, 3).reason is Reason.BAD_SIGNATURE

    def test_digest_mismatch(self, committee4):
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in range(3)])
        assert verify_aggregate(proof, b"other", committee4.registry, 3).reason is Reason.DIGEST_MISMATCH

    def test_invalid_proof_evidence_slashes(self, committee4):
        reg = committee4.registry
        proof = aggregate_proof(MSG, [committee4.sign(v, MSG) for v in range(2)])
        reg.handle_evidence(MisbehaviorEvidence(EvidenceKind.INVALID_PROOF, 1, (proof, MSG, 3)))
        assert reg.records[1].status is Status.SLASHED

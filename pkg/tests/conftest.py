import pytest
from hypothesis import settings

from qlink.custody import Enclave, SignatureScheme
from qlink.registry import QuorumMode, Registry, Role, ValidatorRecord

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


class Committee:
    """Registry plus enclave handles for ``n`` validators, validator 0 a certified hub."""

    def __init__(self, n, mode=QuorumMode.COUNT_2F1, weights=None, seed=0, hubs=1, scheme=None):
        self.enclave = Enclave(scheme or SignatureScheme(), seed=seed)
        self.registry = Registry(mode)
        self.handles = {}
        for v in range(n):
            handle, pk = self.enclave.keygen(v)
            self.handles[v] = handle
            role = Role.QKD_HUB if v < hubs else Role.CONSUMER
            cert = f"cert-{v}" if v < hubs else None
            w = weights[v] if weights else 1
            self.registry.register(ValidatorRecord(v, pk, w, role, cert))

    def sign(self, v, message):
        return self.enclave.sign(self.handles[v], message)


@pytest.fixture
def committee4():
    return Committee(4)


@pytest.fixture
def make_committee():
    return Committee

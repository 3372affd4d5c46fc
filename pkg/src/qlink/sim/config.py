"""Scenario configuration loaded from versioned JSON files.

Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..qkd import DEFAULT_BUFFER_BITS
from ..registry import QuorumMode, Role

SCHEMA_VERSION = 1

# Two-point fit through the 5 km and 50 km operating points (13.1 and 1.16 Mbit/s).
CALIBRATION_POINTS = ((5.0, 13.1e6), (50.0, 1.16e6))
HELD_OUT_POINT = (10.0, 10.3e6)


@dataclass
class LinkSpec:
    endpoint_a: int
    endpoint_b: int
    distance_km: float
    base_rate_r0: float | None = None
    attenuation_lambda: float | None = None
    buffer_capacity: int = DEFAULT_BUFFER_BITS


@dataclass
class ValidatorSpec:
    id: int
    weight: int = 1
    role: str = Role.CONSUMER.value
    certificate: str | None = None


@dataclass
class ScenarioConfig:
    seed: int = 0
    duration_s: float = 50.0
    links: list[LinkSpec] = field(default_factory=list)
    traffic_kbps: float = 20.0
    traffic_links: list[int] = field(default_factory=lambda: [0])
    packet_bits: int = 500
    key_start_delay_s: float = 0.040
    committee_n: int = 4
    validators: list[ValidatorSpec] = field(default_factory=list)
    cert_allowlist: list[str] | None = None
    quorum_mode: str = QuorumMode.COUNT_2F1.value
    strict_supermajority: bool = True
    k_confirmations: int = 6
    source_block_interval_s: float = 600.0
    dest_block_interval_s: float = 12.0
    dest_finality_lag_s: float = 780.0
    signature_size: int = 1300
    sign_cost_s: float = 0.010
    verify_cost_s: float = 0.001
    seal_cost_s: float = 0.0001
    link_delay_s: float = 0.005
    propose_wait_s: float = 1.0
    phase_timeout_s: float = 1.0
    max_rounds: int = 4
    lock_amount: int = 100
    attacks: list[str] = field(default_factory=list)
    research_mode: bool = False
    event_log: str | None = None
    metrics_out: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be > 0")
        if self.committee_n < 1:
            raise ConfigError("committee_n must be >= 1")
        if self.traffic_kbps <= 0:
            raise ConfigError("traffic_kbps must be > 0")
        if self.packet_bits <= 0 or self.k_confirmations < 1:
            raise ConfigError("packet_bits and k_confirmations must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            QuorumMode(self.quorum_mode)
        except ValueError:
            raise ConfigError(f"unknown quorum_mode {self.quorum_mode!r}") from None
        for i in self.traffic_links:
            if self.links and not 0 <= i < len(self.links):
                raise ConfigError(f"traffic_links index {i} has no link")

    @property
    def packet_interval_s(self) -> float:
        return self.packet_bits / (self.traffic_kbps * 1000.0)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        data = dict(data)
        try:
            n = data.get("committee_n", 4)
            # omitted topology falls back to the default hub layout for this committee size
            data["links"] = ([_strict(LinkSpec, x) for x in data["links"]] if "links" in data
                             else hub_topology(n) if isinstance(n, int) else [])
            data["validators"] = ([_strict(ValidatorSpec, x) for x in data["validators"]]
                                  if "validators" in data
                                  else default_validators(n) if isinstance(n, int) and n > 0 else [])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("scenario file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _strict(cls, data: dict) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} entry must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def hub_topology(n: int, hubs: int = 2, hub_km: float = 5.0, spoke_km: float = 10.0) -> list[LinkSpec]:
    """Hub-and-spoke links: hubs meshed together, every other validator linked to every hub."""
    hubs = min(hubs, n)
    links = [LinkSpec(a, b, hub_km) for a in range(hubs) for b in range(a + 1, hubs)]
    links += [LinkSpec(h, v, spoke_km) for h in range(hubs) for v in range(hubs, n)]
    return links


def full_mesh(n: int, distance_km: float) -> list[LinkSpec]:
    return [LinkSpec(a, b, distance_km) for a in range(n) for b in range(a + 1, n)]


def default_validators(n: int, hubs: int = 2) -> list[ValidatorSpec]:
    return [
        ValidatorSpec(v, role=Role.QKD_HUB.value, certificate=f"qkd-cert-{v}") if v < hubs
        else ValidatorSpec(v)
        for v in range(n)
    ]


def default_bridge_config(**overrides: Any) -> ScenarioConfig:
    n = overrides.pop("committee_n", 4)
    hubs = overrides.pop("hubs", 2)
    base = dict(committee_n=n, links=hub_topology(n, hubs), validators=default_validators(n, hubs))
    base.update(overrides)
    return ScenarioConfig(**base)

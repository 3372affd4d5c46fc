"""Experiment metrics and their JSON/CSV export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import QLinkError


class IoError(QLinkError, OSError):
    pass


@dataclass
class Metrics:
    """Measured outputs of one run.

    ``bits_consumed`` counts one-time-pad bits spent on validator traffic;
    ``mac_key_bits`` counts the separate per-message MAC keys. Their sum is the
    total key drawn from the buffers. ``surplus_ratio`` is generated over
    ``bits_consumed``.
    """

    label: str = ""
    distance_km: float | None = None
    duration_s: float = 0.0
    key_rate_bps: float = 0.0
    bits_generated: int = 0
    bits_consumed: int = 0
    mac_key_bits: int = 0
    surplus_ratio: float = 0.0
    missed_packets: int = 0
    packets_sent: int = 0
    utilization_pct: float = 0.0
    per_round_latency_s: float = 0.0
    crypto_overhead_s: float = 0.0
    end_to_end_latency_s: float = 0.0
    proof_bundle_bytes: int = 0
    sustainable: bool | None = None
    extra: dict = field(default_factory=dict)

    @property
    def key_bits_consumed(self) -> int:
        return self.bits_consumed + self.mac_key_bits

    @property
    def loss_fraction(self) -> float:
        return self.missed_packets / self.packets_sent if self.packets_sent else 0.0

    def finish(self) -> "Metrics":
        self.surplus_ratio = self.bits_generated / self.bits_consumed if self.bits_consumed else 0.0
        delivered = self.packets_sent - self.missed_packets
        self.utilization_pct = 100.0 * delivered / self.packets_sent if self.packets_sent else 0.0
        return self


FIELD_ORDER = [f.name for f in fields(Metrics)]
CSV_FIELDS = [n for n in FIELD_ORDER if n != "extra"]


def export_metrics(metrics: list[Metrics], format: str, path: str | Path) -> Path:
    path = Path(path)
    fmt = format.lower()
    try:
        if fmt == "json":
            path.write_text(json.dumps([asdict(m) for m in metrics], indent=2) + "\n")
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
                writer.writeheader()
                for m in metrics:
                    writer.writerow(asdict(m))
        else:
            raise ValueError(f"unknown format {format!r}")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def import_metrics(path: str | Path) -> list[Metrics]:
    return [Metrics(**row) for row in json.loads(Path(path).read_text())]

"""Deterministic discrete-event loop and the JSON-lines event log.

Simulated time is kept in integer microseconds.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

US = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


def _jsonable(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (set, frozenset)):
        return sorted(_jsonable(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    if isinstance(value, float):
        return round(value, 9)
    return value


class EventLog:
    """Append-only, timestamp-ordered record of everything a run did."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[dict] = []
        self._last_t = 0

    def append(self, t_us: int, kind: str, **fields: Any) -> None:
        if t_us < self._last_t:
            raise ValueError(f"event at {t_us}us precedes previous event at {self._last_t}us")
        self._last_t = t_us
        if self.enabled:
            self.records.append({"t_us": t_us, "type": kind, **_jsonable(fields)})

    def __len__(self) -> int:
        return len(self.records)

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def of_type(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["type"] == kind]


@dataclass(order=True)
class _Scheduled:
    t_us: int
    seq: int
    action: Callable[[int], None] = field(compare=False)


class Simulation:
    """Single-threaded event loop; ties break in scheduling order."""

    def __init__(self, log: EventLog | None = None):
        self.now_us = 0
        self.log = log if log is not None else EventLog()
        self._queue: list[_Scheduled] = []
        self._seq = 0
        self.steps = 0
        self.step_hooks: list[Callable[[int], None]] = []

    @property
    def now(self) -> float:
        return self.now_us / US

    def schedule(self, t_us: int, action: Callable[[int], None]) -> None:
        if t_us < self.now_us:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._queue, _Scheduled(t_us, self._seq, action))
        self._seq += 1

    def run(self, until_us: int | None = None) -> None:
        while self._queue:
            if until_us is not None and self._queue[0].t_us > until_us:
                break
            item = heapq.heappop(self._queue)
            self.now_us = item.t_us
            item.action(item.t_us)
            self.steps += 1
            for hook in self.step_hooks:
                hook(item.t_us)
        if until_us is not None:
            self.now_us = max(self.now_us, until_us)

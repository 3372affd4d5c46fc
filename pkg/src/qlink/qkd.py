"""QKD key plane: distance-attenuated key generation, bounded key buffers,
and one-time-pad sealing with a Wegman-Carter polynomial MAC.

Key material is a deterministic, offset-indexed pseudorandom stream per link,
so both endpoints of a link can reproduce any block from its offset alone.
"""

from __future__ import annotations

import hashlib
import hmac
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    AuthenticationFailure,
    FitError,
    InsufficientKey,
    InvalidParameter,
    KeyDesyncError,
)

MAC_KEY_BITS = 256
MAC_TAG_BITS = 128
DEFAULT_BUFFER_BITS = 50_000_000

_P1305 = (1 << 130) - 5
_RCLAMP = 0x0FFFFFFC0FFFFFFC0FFFFFFC0FFFFFFF


class Bits(NamedTuple):
    """A bit-string stored MSB-first in an int."""

    value: int
    length: int

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bits":
        return cls(int.from_bytes(data, "big"), 8 * len(data))

    def to_bytes(self) -> bytes:
        if self.length % 8:
            raise ValueError("bit-string is not byte aligned")
        return self.value.to_bytes(self.length // 8, "big")

    def __xor__(self, other: "Bits") -> "Bits":  # type: ignore[override]
        if self.length != other.length:
            raise ValueError("length mismatch")
        return Bits(self.value ^ other.value, self.length)


@dataclass(frozen=True)
class QkdLinkConfig:
    endpoint_a: int
    endpoint_b: int
    distance_km: float
    base_rate_r0: float
    attenuation_lambda: float
    buffer_capacity: int = DEFAULT_BUFFER_BITS

    def __post_init__(self):
        if self.distance_km < 0:
            raise InvalidParameter("distance_km must be >= 0")
        if self.base_rate_r0 <= 0:
            raise InvalidParameter("base_rate_r0 must be > 0")
        if self.attenuation_lambda < 0:
            raise InvalidParameter("attenuation_lambda must be >= 0")
        if self.buffer_capacity <= 0:
            raise InvalidParameter("buffer_capacity must be > 0")
        if self.endpoint_a == self.endpoint_b:
            raise InvalidParameter("a link needs two distinct endpoints")

    @property
    def link_id(self) -> tuple[int, int]:
        return (min(self.endpoint_a, self.endpoint_b), max(self.endpoint_a, self.endpoint_b))


def key_rate(distance_km: float, config: QkdLinkConfig) -> float:
    """Secret-key rate in bits/s at ``distance_km`` for the link's (R0, lambda)."""
    if distance_km < 0:
        raise InvalidParameter("distance must be non-negative")
    return config.base_rate_r0 * math.exp(-config.attenuation_lambda * distance_km)


class ChannelFit(NamedTuple):
    r0: float
    attenuation: float
    residuals: tuple[float, ...]
    """Relative error of the fitted rate at each input point."""


def fit_channel_params(points: Iterable[tuple[float, float]]) -> ChannelFit:
    pts = [(float(d), float(r)) for d, r in points]
    if len(pts) < 2:
        raise FitError("need at least two points")
    if any(r <= 0 for _, r in pts):
        raise FitError("rates must be positive")
    if len({d for d, _ in pts}) != len(pts):
        raise FitError("duplicate distances")

    if len(pts) == 2:
        (d1, r1), (d2, r2) = sorted(pts)
        lam = math.log(r1 / r2) / (d2 - d1)
        r0 = r1 * math.exp(lam * d1)
    else:
        d = np.array([p[0] for p in pts])
        y = np.log([p[1] for p in pts])
        design = np.column_stack([np.ones_like(d), -d])
        (log_r0, lam), *_ = np.linalg.lstsq(design, y, rcond=None)
        r0, lam = math.exp(log_r0), float(lam)

    residuals = tuple(r0 * math.exp(-lam * d) / r - 1.0 for d, r in pts)
    return ChannelFit(r0, lam, residuals)


class KeyStream:
    """Offset-indexed key bits shared by both ends of one QKD link."""

    CHUNK_BITS = 4096

    def __init__(self, seed: int, label: str):
        self._prefix = seed.to_bytes(8, "big", signed=False) + label.encode()
        self._cache: dict[int, int] = {}

    def _chunk(self, index: int) -> int:
        chunk = self._cache.get(index)
        if chunk is None:
            if len(self._cache) > 64:
                self._cache.clear()
            h = hashlib.shake_256(self._prefix + index.to_bytes(8, "big"))
            chunk = self._cache[index] = int.from_bytes(h.digest(self.CHUNK_BITS // 8), "big")
        return chunk

    def bits(self, offset: int, length: int) -> int:
        if length <= 0:
            return 0
        first = offset // self.CHUNK_BITS
        last = (offset + length - 1) // self.CHUNK_BITS
        acc = 0
        for i in range(first, last + 1):
            acc = (acc << self.CHUNK_BITS) | self._chunk(i)
        span = (last - first + 1) * self.CHUNK_BITS
        shift = span - (offset - first * self.CHUNK_BITS) - length
        return (acc >> shift) & ((1 << length) - 1)


@dataclass
class KeyBlock:
    offset: int
    bits: int
    length: int


@dataclass
class KeyBuffer:
    capacity: int
    stream: KeyStream
    available_bits: int = 0
    next_offset: int = 0
    generated_total: int = 0
    consumed_total: int = 0
    overflow_discarded: int = 0
    ledger: list[tuple[int, int]] = field(default_factory=list, repr=False)

    def conserved(self) -> bool:
        return (
            self.generated_total
            == self.consumed_total + self.available_bits + self.overflow_discarded
            and self.next_offset == self.consumed_total
            and 0 <= self.available_bits <= self.capacity
        )

    def ranges_disjoint(self) -> bool:
        ranges = sorted(self.ledger)
        return all(a_end <= b_start for (_, a_end), (b_start, _) in zip(ranges, ranges[1:]))


def new_buffer(capacity: int, seed: int, label: str) -> KeyBuffer:
    return KeyBuffer(capacity=capacity, stream=KeyStream(seed, label))


def tick_generate(buffer: KeyBuffer, rate: float, dt: float) -> KeyBuffer:
    if dt < 0:
        raise InvalidParameter("dt must be >= 0")
    produced = math.floor(rate * dt)
    if produced <= 0:
        return buffer
    room = buffer.capacity - buffer.available_bits
    kept = min(produced, room)
    buffer.available_bits += kept
    buffer.overflow_discarded += produced - kept
    buffer.generated_total += produced
    return buffer


def draw_key(buffer: KeyBuffer, n_bits: int) -> KeyBlock:
    if n_bits <= 0:
        raise InvalidParameter("n_bits must be > 0")
    if n_bits > buffer.available_bits:
        raise InsufficientKey(n_bits, buffer.available_bits)
    offset = buffer.next_offset
    block = KeyBlock(offset, buffer.stream.bits(offset, n_bits), n_bits)
    buffer.available_bits -= n_bits
    buffer.next_offset += n_bits
    buffer.consumed_total += n_bits
    buffer.ledger.append((offset, offset + n_bits))
    return block


def _poly_tag(mac_key: int, message: Bits) -> int:
    r = (mac_key >> 128) & _RCLAMP
    s = mac_key & ((1 << 128) - 1)
    data = message.length.to_bytes(8, "big") + message.value.to_bytes((message.length + 7) // 8, "big")
    h = 0
    for i in range(0, len(data), 16):
        chunk = data[i : i + 16]
        c = int.from_bytes(chunk, "little") + (1 << (8 * len(chunk)))
        h = ((h + c) * r) % _P1305
    return (h + s) & ((1 << MAC_TAG_BITS) - 1)


def mac_tag(mac_key: KeyBlock, ciphertext: Bits) -> int:
    if mac_key.length != MAC_KEY_BITS:
        raise InvalidParameter(f"MAC key must be {MAC_KEY_BITS} bits")
    return _poly_tag(mac_key.bits, ciphertext)


@dataclass(frozen=True)
class SealedMessage:
    ciphertext: Bits
    mac_tag: int
    key_offset: int
    sender: int
    receiver: int

    @property
    def key_bits(self) -> int:
        return self.ciphertext.length + MAC_KEY_BITS


def otp_seal(plaintext: Bits | bytes, buffer: KeyBuffer, sender: int = 0, receiver: int = 1) -> SealedMessage:
    if isinstance(plaintext, (bytes, bytearray)):
        plaintext = Bits.from_bytes(bytes(plaintext))
    need = plaintext.length + MAC_KEY_BITS
    if need > buffer.available_bits:
        # nothing is drawn unless both pad and MAC key fit
        raise InsufficientKey(need, buffer.available_bits)
    pad = draw_key(buffer, plaintext.length)
    key = draw_key(buffer, MAC_KEY_BITS)
    ciphertext = Bits(plaintext.value ^ pad.bits, plaintext.length)
    return SealedMessage(ciphertext, mac_tag(key, ciphertext), pad.offset, sender, receiver)


def otp_open(msg: SealedMessage, pad: KeyBlock, mac_key: KeyBlock) -> Bits:
    """Authenticate then decrypt. The MAC is checked before any plaintext is produced."""
    if pad.offset != msg.key_offset or pad.length != msg.ciphertext.length:
        raise KeyDesyncError(f"pad at {pad.offset} does not match message offset {msg.key_offset}")
    if mac_key.offset != msg.key_offset + msg.ciphertext.length:
        raise KeyDesyncError("MAC key block is not adjacent to the pad")
    expected = mac_tag(mac_key, msg.ciphertext)
    if not hmac.compare_digest(expected.to_bytes(16, "big"), msg.mac_tag.to_bytes(16, "big")):
        raise AuthenticationFailure("MAC mismatch")
    return Bits(msg.ciphertext.value ^ pad.bits, msg.ciphertext.length)


def traffic_demand(payload_bps: float, packet_bits: int = 500) -> float:
    """Key bits/s needed to carry ``payload_bps`` including per-packet MAC keys."""
    return payload_bps + payload_bps / packet_bits * MAC_KEY_BITS


def sustainability_check(rate: float, traffic: float) -> bool:
    return rate > traffic


class QkdLink:
    """A fiber link plus the shared buffer both endpoints draw from.

    The receiver side tracks which offsets it has already opened so a replayed
    message is rejected as a key desync rather than decrypted twice.
    """

    def __init__(self, config: QkdLinkConfig, seed: int, start_delay_s: float = 0.0):
        self.config = config
        a, b = config.link_id
        self.buffer = new_buffer(config.buffer_capacity, seed, f"link:{a}-{b}")
        self.alive = True
        self.start_delay_s = start_delay_s
        self.missed = 0
        self.sealed = 0
        self._opened: set[int] = set()
        self._clock = 0.0

    @property
    def link_id(self) -> tuple[int, int]:
        return self.config.link_id

    @property
    def rate(self) -> float:
        return key_rate(self.config.distance_km, self.config)

    def advance_to(self, t: float) -> None:
        """Generate key up to simulated time ``t`` (seconds)."""
        if t <= self._clock:
            return
        begin = max(self._clock, self.start_delay_s)
        if self.alive and t > begin:
            tick_generate(self.buffer, self.rate, t - begin)
        self._clock = t

    def seal(self, plaintext: Bits | bytes, sender: int) -> SealedMessage:
        if sender not in self.link_id:
            raise InvalidParameter(f"validator {sender} is not an endpoint of {self.link_id}")
        receiver = self.link_id[1] if sender == self.link_id[0] else self.link_id[0]
        try:
            msg = otp_seal(plaintext, self.buffer, sender, receiver)
        except InsufficientKey:
            self.missed += 1
            raise
        self.sealed += 1
        return msg

    def open(self, msg: SealedMessage) -> Bits:
        if msg.key_offset in self._opened:
            raise KeyDesyncError(f"offset {msg.key_offset} already consumed")
        end = msg.key_offset + msg.ciphertext.length + MAC_KEY_BITS
        if end > self.buffer.next_offset:
            raise KeyDesyncError("message refers to key material that was never drawn")
        n = msg.ciphertext.length
        stream = self.buffer.stream
        pad = KeyBlock(msg.key_offset, stream.bits(msg.key_offset, n), n)
        key = KeyBlock(msg.key_offset + n, stream.bits(msg.key_offset + n, MAC_KEY_BITS), MAC_KEY_BITS)
        plaintext = otp_open(msg, pad, key)
        self._opened.add(msg.key_offset)
        return plaintext

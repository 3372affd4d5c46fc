"""Simulated source/destination chains and the lock-and-mint bridge contract.

Merkle trees duplicate the last node on odd-width levels. A block at height
``h`` with tip ``t`` has ``t - h + 1`` confirmations.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from . import custody
from .custody import AggregatedProof
from .errors import InvalidParameter, WatermarkMonotonicity

HashFn = Callable[[bytes], bytes]


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


EMPTY_ROOT = sha256(b"")


def merkle_root(leaves: list[bytes], h: HashFn = sha256) -> bytes:
    if not leaves:
        return h(b"")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [h(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


class Side(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"


@dataclass(frozen=True)
class MerkleProof:
    leaf_hash: bytes
    siblings: tuple[tuple[bytes, Side], ...]
    root: bytes


def verify_merkle_proof(proof: MerkleProof, h: HashFn = sha256) -> bool:
    node = proof.leaf_hash
    for sibling, side in proof.siblings:
        node = h(sibling + node) if side is Side.LEFT else h(node + sibling)
    return node == proof.root


@dataclass(frozen=True)
class Header:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: float

    def encode(self) -> bytes:
        return struct.pack(">Q", self.height) + self.prev_hash + self.merkle_root + struct.pack(">d", self.timestamp)

    def hash(self, h: HashFn = sha256) -> bytes:
        return h(self.encode())


@dataclass
class Block:
    header: Header
    txs: list[bytes]


def merkle_proof(block: Block, tx_index: int, h: HashFn = sha256) -> MerkleProof:
    if not 0 <= tx_index < len(block.txs):
        raise InvalidParameter(f"tx index {tx_index} out of range for {len(block.txs)} txs")
    level = [h(tx) for tx in block.txs]
    leaf = level[tx_index]
    idx = tx_index
    siblings = []
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        if idx % 2:
            siblings.append((level[idx - 1], Side.LEFT))
        else:
            siblings.append((level[idx + 1], Side.RIGHT))
        level = [h(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        idx //= 2
    return MerkleProof(leaf, tuple(siblings), level[0])


GENESIS_PREV = bytes(32)


class HeaderChain:
    """Append-only header chain with full blocks kept for proof generation.

    Reorgs replace the suffix above a fork point with a strictly longer branch.
    """

    def __init__(self, chain_id: str, block_interval_s: float = 600.0, hash_fn: HashFn = sha256):
        self.chain_id = chain_id
        self.block_interval_s = block_interval_s
        self.hash_fn = hash_fn
        self.blocks: list[Block] = []
        self.pending: list[bytes] = []

    @property
    def headers(self) -> list[Header]:
        return [b.header for b in self.blocks]

    @property
    def tip_height(self) -> int:
        return self.blocks[-1].header.height if self.blocks else -1

    def header_at(self, height: int) -> Header | None:
        if 0 <= height < len(self.blocks):
            return self.blocks[height].header
        return None

    def _next_header(self, txs: list[bytes], timestamp: float, parent: Block | None) -> Header:
        prev = parent.header.hash(self.hash_fn) if parent else GENESIS_PREV
        height = parent.header.height + 1 if parent else 0
        root = merkle_root([self.hash_fn(t) for t in txs], self.hash_fn)
        return Header(height, prev, root, timestamp)

    def append_block(self, txs: list[bytes] | None = None, timestamp: float | None = None) -> Block:
        """Mine a block from ``txs`` (or the pending pool when omitted)."""
        if txs is None:
            txs, self.pending = self.pending, []
        parent = self.blocks[-1] if self.blocks else None
        if timestamp is None:
            timestamp = (parent.header.timestamp + self.block_interval_s) if parent else 0.0
        block = Block(self._next_header(list(txs), timestamp, parent), list(txs))
        self.blocks.append(block)
        return block

    def linkage_valid(self) -> bool:
        for prev, cur in zip(self.blocks, self.blocks[1:]):
            if cur.header.prev_hash != prev.header.hash(self.hash_fn):
                return False
            if cur.header.height != prev.header.height + 1:
                return False
        return True

    def reorg(self, fork_height: int, branch: list[list[bytes]]) -> bool:
        """Replace blocks above ``fork_height`` with ``branch`` if it makes the chain longer."""
        if fork_height + 1 + len(branch) <= len(self.blocks):
            return False
        kept = self.blocks[: fork_height + 1]
        self.blocks = kept
        for txs in branch:
            self.append_block(txs)
        return True


class LockEvent(NamedTuple):
    event_id: bytes
    chain_id: str
    amount: int
    sender: str
    recipient_on_dest: str
    block_height: int
    tx_index: int
    nonce: int

    def encode(self) -> bytes:
        return json.dumps(
            {"event_id": self.event_id.hex(), "chain": self.chain_id, "amount": self.amount,
             "sender": self.sender, "recipient": self.recipient_on_dest,
             "height": self.block_height, "index": self.tx_index, "nonce": self.nonce},
            sort_keys=True, separators=(",", ":"),
        ).encode()


def event_id_for(chain_id: str, block_height: int, tx_index: int, nonce: int) -> bytes:
    return sha256(chain_id.encode() + struct.pack(">QQQ", block_height, tx_index, nonce))


def verify_lock_event(event: LockEvent, proof: MerkleProof, chain_view: HeaderChain, k: int) -> bool:
    header = chain_view.header_at(event.block_height)
    if header is None:
        return False
    if proof.leaf_hash != chain_view.hash_fn(event.encode()):
        return False
    if proof.root != header.merkle_root or not verify_merkle_proof(proof, chain_view.hash_fn):
        return False
    return chain_view.tip_height - event.block_height + 1 >= k


@dataclass
class LightClientState:
    """Finality watermark plus the event leaves included at each finalized height."""

    finalized_height: int = -1
    included: dict[int, set[bytes]] = field(default_factory=dict)

    def advance(self, height: int, leaves: set[bytes] | None = None) -> None:
        if height < self.finalized_height:
            raise WatermarkMonotonicity(f"watermark {self.finalized_height} cannot move back to {height}")
        self.finalized_height = height
        if leaves is not None:
            self.included[height] = set(leaves)


def verify_finalized_event(event: LockEvent, state: LightClientState) -> bool:
    if event.block_height > state.finalized_height:
        return False
    return sha256(event.encode()) in state.included.get(event.block_height, ())


class FinalityChain(HeaderChain):
    """Ethereum-like chain whose blocks finalize ``finality_lag_s`` after they are produced."""

    def __init__(self, chain_id: str, block_interval_s: float = 12.0, finality_lag_s: float = 780.0):
        super().__init__(chain_id, block_interval_s)
        self.finality_lag_s = finality_lag_s
        self.light_client = LightClientState()

    def sync_light_client(self, now: float) -> None:
        for block in self.blocks[self.light_client.finalized_height + 1 :]:
            if block.header.timestamp + self.finality_lag_s > now:
                break
            self.light_client.advance(block.header.height, {self.hash_fn(t) for t in block.txs})


class Outcome(str, enum.Enum):
    OK = "OK"
    REJECT_REPLAY = "RejectReplay"
    REJECT_THRESHOLD = "RejectThreshold"
    REJECT_SIGNER = "RejectSigner"
    REJECT_SIGNATURE = "RejectSignature"
    REJECT_DIGEST = "RejectDigest"
    REJECT_NO_QKD_PATH = "RejectNoQkdPath"
    REJECT_OVERBURN = "RejectOverBurn"


class ContractResult(NamedTuple):
    ok: bool
    outcome: Outcome
    amount: int = 0


MintResult = ReleaseResult = ContractResult

_VERDICT_TO_OUTCOME = {
    custody.Reason.THRESHOLD_NOT_MET: Outcome.REJECT_THRESHOLD,
    custody.Reason.UNREGISTERED_SIGNER: Outcome.REJECT_SIGNER,
    custody.Reason.INACTIVE_SIGNER: Outcome.REJECT_SIGNER,
    custody.Reason.BAD_SIGNATURE: Outcome.REJECT_SIGNATURE,
    custody.Reason.DIGEST_MISMATCH: Outcome.REJECT_DIGEST,
}


@dataclass
class BridgeContract:
    chain_id: str
    registry: object
    threshold: int | None = None
    locked_total: int = 0
    minted_total: int = 0
    consumed_event_ids: set[bytes] = field(default_factory=set)
    nonce: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def qkd_hub_present(self) -> bool:
        return self.registry.qkd_hub_present

    def current_threshold(self) -> int:
        return self.threshold if self.threshold is not None else self.registry.finality_threshold()

    def _record(self, op: str, result: ContractResult, **extra) -> ContractResult:
        self.log.append({"op": op, "chain": self.chain_id, "outcome": result.outcome.value,
                         "amount": result.amount, **extra})
        return result

    def _check_proof(self, proof: AggregatedProof, message: bytes) -> Outcome:
        if not self.qkd_hub_present:
            return Outcome.REJECT_NO_QKD_PATH
        verdict = custody.verify_aggregate(proof, message, self.registry, self.current_threshold())
        return Outcome.OK if verdict.ok else _VERDICT_TO_OUTCOME[verdict.reason]

    def snapshot(self) -> dict:
        return {"chain_id": self.chain_id, "locked_total": self.locked_total,
                "minted_total": self.minted_total, "nonce": self.nonce,
                "consumed_event_ids": sorted(e.hex() for e in self.consumed_event_ids)}


def mint_message(dest_chain: str, event: LockEvent) -> bytes:
    """Bytes the committee signs to authorize minting ``event`` on ``dest_chain``."""
    return b"qlink-mint|" + dest_chain.encode() + b"|" + event.encode()


def release_message(src_chain: str, burn_id: bytes, amount: int) -> bytes:
    return b"qlink-release|" + src_chain.encode() + b"|" + burn_id + struct.pack(">Q", amount)


def submit_lock(contract: BridgeContract, chain: HeaderChain, sender: str, amount: int,
                recipient: str) -> LockEvent:
    if amount <= 0:
        raise InvalidParameter("lock amount must be positive")
    contract.nonce += 1
    height = chain.tip_height + 1
    index = len(chain.pending)
    event = LockEvent(event_id_for(chain.chain_id, height, index, contract.nonce), chain.chain_id,
                      amount, sender, recipient, height, index, contract.nonce)
    chain.pending.append(event.encode())
    contract.locked_total += amount
    contract._record("lock", ContractResult(True, Outcome.OK, amount), event_id=event.event_id.hex())
    return event


def contract_mint(dest: BridgeContract, event: LockEvent, proof: AggregatedProof) -> MintResult:
    eid = event.event_id.hex()
    if event.event_id in dest.consumed_event_ids:
        return dest._record("mint", ContractResult(False, Outcome.REJECT_REPLAY), event_id=eid)
    outcome = dest._check_proof(proof, mint_message(dest.chain_id, event))
    if outcome is not Outcome.OK:
        return dest._record("mint", ContractResult(False, outcome), event_id=eid)
    dest.consumed_event_ids.add(event.event_id)
    dest.minted_total += event.amount
    return dest._record("mint", ContractResult(True, Outcome.OK, event.amount), event_id=eid)


def burn(dest: BridgeContract, amount: int) -> bytes:
    """Allocate a burn id on the destination; the committee then certifies the release."""
    dest.nonce += 1
    return sha256(b"burn" + dest.chain_id.encode() + struct.pack(">QQ", dest.nonce, amount))


def contract_burn_release(dest: BridgeContract, src: BridgeContract, amount: int,
                          proof: AggregatedProof, burn_id: bytes) -> ReleaseResult:
    bid = burn_id.hex()
    if amount > dest.minted_total:
        return src._record("release", ContractResult(False, Outcome.REJECT_OVERBURN), burn_id=bid)
    if burn_id in src.consumed_event_ids:
        return src._record("release", ContractResult(False, Outcome.REJECT_REPLAY), burn_id=bid)
    outcome = src._check_proof(proof, release_message(src.chain_id, burn_id, amount))
    if outcome is not Outcome.OK:
        return src._record("release", ContractResult(False, outcome), burn_id=bid)
    src.consumed_event_ids.add(burn_id)
    dest.minted_total -= amount
    src.locked_total -= amount
    return src._record("release", ContractResult(True, Outcome.OK, amount), burn_id=bid)

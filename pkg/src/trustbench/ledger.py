"""Append-only hash chain of endorsed transactions.

Chain file layout (all integers little-endian)::

    file   := record*
    record := u32 block_len, block[block_len]
    block  := body, block_hash[32]
    body   := u64 height, prev_hash[32], u32 n_tx, (u32 tx_len, tx[tx_len])*

``block_hash`` is SHA-256 of ``body``.  Each ``tx`` is the canonical JSON
encoding of one transaction (sorted keys, no whitespace, UTF-8).  The genesis
block is stored like any other: height 0, all-zero prev_hash, no transactions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .errors import ChainNotVerifiedError

log = logging.getLogger(__name__)

ZERO_HASH = bytes(32)
DEFAULT_BLOCK_SIZE = 32


class TxKind(str, Enum):
    MODEL_REGISTERED = "ModelRegistered"
    TASK_SUBMITTED = "TaskSubmitted"
    RESULT_REPORTED = "ResultReported"
    ENDORSEMENT_RECORDED = "EndorsementRecorded"
    VERDICT = "Verdict"
    INVALID_FLAGGED = "InvalidFlagged"


ENDORSED_KINDS = frozenset({TxKind.ENDORSEMENT_RECORDED, TxKind.VERDICT})

# Node roles carried on transactions.
ROLE_MODEL_STORE = "model-store"
ROLE_VALIDATION_REQUESTER = "validation-requester"
ROLE_VALIDATION_COMPUTER = "validation-computer"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode()


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    kind: TxKind
    payload: dict
    endorsements: tuple = ()
    logical_time: int = 0

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "kind": self.kind.value,
            "payload": self.payload,
            "endorsements": list(self.endorsements),
            "logical_time": self.logical_time,
        }

    def encode(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def decode(cls, raw: bytes) -> "Transaction":
        d = json.loads(raw.decode())
        if not isinstance(d, dict) or not isinstance(d.get("payload"), dict):
            raise ValueError("transaction must be an object with a mapping payload")
        return cls(
            tx_id=d["tx_id"],
            kind=TxKind(d["kind"]),
            payload=d["payload"],
            endorsements=tuple(d["endorsements"]),
            logical_time=d["logical_time"],
        )

    def mentions(self, source_id: str) -> bool:
        p = self.payload
        return (
            source_id in self.endorsements
            or p.get("reporter") == source_id
            or source_id in p.get("endorsers", ())
        )


@dataclass(frozen=True)
class EndorsementPolicy:
    required_endorsers: int

    def __post_init__(self):
        if self.required_endorsers < 1:
            raise ValueError("required_endorsers must be >= 1")


@dataclass(frozen=True)
class Submission:
    accepted: bool
    reason: str = ""

    def __bool__(self):
        return self.accepted


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    tx_bytes: tuple  # raw canonical encodings, in block order
    block_hash: bytes

    @staticmethod
    def encode_body(height: int, prev_hash: bytes, tx_bytes: Sequence[bytes]) -> bytes:
        parts = [struct.pack("<Q", height), prev_hash, struct.pack("<I", len(tx_bytes))]
        for raw in tx_bytes:
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    @classmethod
    def build(cls, height: int, prev_hash: bytes, txs: Iterable[Transaction]) -> "Block":
        tx_bytes = tuple(tx.encode() for tx in txs)
        body = cls.encode_body(height, prev_hash, tx_bytes)
        return cls(height, prev_hash, tx_bytes, hashlib.sha256(body).digest())

    def body(self) -> bytes:
        return self.encode_body(self.height, self.prev_hash, self.tx_bytes)

    def to_bytes(self) -> bytes:
        return self.body() + self.block_hash

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        if len(data) < 8 + 32 + 4 + 32:
            raise ValueError("block too short")
        (height,) = struct.unpack_from("<Q", data, 0)
        prev_hash = data[8:40]
        (n_tx,) = struct.unpack_from("<I", data, 40)
        off = 44
        txs = []
        for _ in range(n_tx):
            if off + 4 > len(data) - 32:
                raise ValueError("truncated transaction length")
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + n > len(data) - 32:
                raise ValueError("truncated transaction")
            txs.append(bytes(data[off : off + n]))
            off += n
        if off != len(data) - 32:
            raise ValueError("trailing bytes in block")
        return cls(height, bytes(prev_hash), tuple(txs), bytes(data[off:]))

    @property
    def transactions(self) -> List[Transaction]:
        return [Transaction.decode(raw) for raw in self.tx_bytes]


def genesis_block() -> Block:
    return Block.build(0, ZERO_HASH, ())


@dataclass(frozen=True)
class ChainStatus:
    ok: bool
    height: Optional[int] = None  # first broken height when not ok
    reason: str = ""
    head_hash: str = ""
    n_blocks: int = 0

    def __bool__(self):
        return self.ok


def verify_chain(blocks: Sequence[Block]) -> ChainStatus:
    """Recompute every block hash and prev-hash link."""
    if not blocks:
        return ChainStatus(False, 0, "empty_chain")
    prev = ZERO_HASH
    for i, blk in enumerate(blocks):
        if blk.height != i:
            return ChainStatus(False, i, "height_mismatch")
        if blk.prev_hash != prev:
            return ChainStatus(False, i, "prev_hash_mismatch")
        if hashlib.sha256(blk.body()).digest() != blk.block_hash:
            return ChainStatus(False, i, "hash_mismatch")
        for raw in blk.tx_bytes:
            try:
                if Transaction.decode(raw).encode() != raw:
                    return ChainStatus(False, i, "non_canonical_tx")
            except (ValueError, KeyError, TypeError):
                return ChainStatus(False, i, "malformed_tx")
        prev = blk.block_hash
    return ChainStatus(True, head_hash=prev.hex(), n_blocks=len(blocks))


def serialize_chain(blocks: Sequence[Block]) -> bytes:
    out = bytearray()
    for blk in blocks:
        raw = blk.to_bytes()
        out += struct.pack("<I", len(raw))
        out += raw
    return bytes(out)


class ChainParseError(ValueError):
    def __init__(self, height: int, message: str):
        super().__init__(f"block {height}: {message}")
        self.height = height


def parse_chain(data: bytes) -> List[Block]:
    blocks = []
    off = 0
    while off < len(data):
        height = len(blocks)
        if off + 4 > len(data):
            raise ChainParseError(height, "truncated length prefix")
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n > len(data):
            raise ChainParseError(height, "truncated block")
        try:
            blocks.append(Block.from_bytes(data[off : off + n]))
        except (ValueError, struct.error) as exc:
            raise ChainParseError(height, str(exc)) from exc
        off += n
    return blocks


def verify_chain_bytes(data: bytes) -> ChainStatus:
    try:
        blocks = parse_chain(data)
    except ChainParseError as exc:
        return ChainStatus(False, exc.height, "parse_error")
    return verify_chain(blocks)


def verify_chain_file(path) -> ChainStatus:
    return verify_chain_bytes(Path(path).read_bytes())


def _payload_ok(payload) -> str:
    if not isinstance(payload, dict):
        return "payload must be a mapping"
    try:
        canonical_json(payload)
    except (TypeError, ValueError) as exc:
        return f"payload not canonically encodable: {exc}"
    return ""


def audit_history(blocks: Sequence[Block], source_id: str) -> List[Transaction]:
    return [tx for blk in blocks for tx in blk.transactions if tx.mentions(source_id)]


def audit_source(blocks: Sequence[Block], source_id: str, status: Optional[ChainStatus]) -> List[Transaction]:
    """Every transaction naming ``source_id`` as reporter or endorser, in block order.

    ``status`` must be a passing ``verify_chain`` result for exactly this head.
    """
    if status is None or not status.ok or status.head_hash != blocks[-1].block_hash.hex():
        raise ChainNotVerifiedError("verify the chain at its current head before auditing")
    return audit_history(blocks, source_id)


class Ledger:
    """In-process chain with an endorsement gate and a single serialized committer.

    Accepted transactions wait in a pending pool; a block is cut automatically
    whenever ``block_size`` of them have accumulated, and ``flush`` cuts the
    remainder.
    """

    def __init__(self, policy: EndorsementPolicy, block_size: int = DEFAULT_BLOCK_SIZE, auto_cut: bool = True):
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.policy = policy
        self.block_size = block_size
        self.auto_cut = auto_cut
        self.blocks: List[Block] = [genesis_block()]
        self.rejected: List[tuple] = []
        self._pending: List[Transaction] = []
        self._clock = 0
        self._tx_serial = 0
        self._lock = threading.RLock()
        self._verified_upto: Optional[bytes] = None

    def tick(self) -> int:
        with self._lock:
            self._clock += 1
            return self._clock

    def submit_tx(self, tx: Transaction, policy: Optional[EndorsementPolicy] = None) -> Submission:
        policy = policy or self.policy
        if not isinstance(tx.kind, TxKind):
            return self._reject(tx, "unknown transaction kind")
        problem = _payload_ok(tx.payload)
        if problem:
            return self._reject(tx, problem)
        if tx.kind in ENDORSED_KINDS and len(set(tx.endorsements)) < policy.required_endorsers:
            return self._reject(
                tx, f"{len(set(tx.endorsements))} endorsements, policy requires {policy.required_endorsers}"
            )
        with self._lock:
            self._pending.append(tx)
            if self.auto_cut and len(self._pending) >= self.block_size:
                self.cut_block()
        return Submission(True)

    def _reject(self, tx, reason) -> Submission:
        log.warning("rejected %s %s: %s", getattr(tx, "kind", "?"), tx.tx_id, reason)
        with self._lock:
            self.rejected.append((tx.tx_id, reason))
        return Submission(False, reason)

    def record(self, kind: TxKind, payload: dict, endorsements: Sequence[str] = ()) -> Submission:
        """Stamp a new transaction with the next id and logical time, then submit it."""
        with self._lock:
            self._tx_serial += 1
            tx = Transaction(f"tx{self._tx_serial:08d}", kind, payload, tuple(endorsements), self.tick())
            return self.submit_tx(tx)

    @property
    def pending(self) -> int:
        return len(self._pending)

    def cut_block(self, force: bool = False) -> Optional[Block]:
        """Move up to ``block_size`` pending transactions, oldest logical time first, into a block."""
        with self._lock:
            if not self._pending and not force:
                return None
            self._pending.sort(key=lambda t: (t.logical_time, t.tx_id))
            take, self._pending = self._pending[: self.block_size], self._pending[self.block_size :]
            head = self.blocks[-1]
            blk = Block.build(head.height + 1, head.block_hash, take)
            self.blocks.append(blk)
            return blk

    def flush(self) -> None:
        with self._lock:
            while self._pending:
                self.cut_block()

    def snapshot(self) -> List[Block]:
        with self._lock:
            return list(self.blocks)

    @property
    def head_hash(self) -> str:
        return self.blocks[-1].block_hash.hex()

    def verify(self) -> ChainStatus:
        blocks = self.snapshot()
        status = verify_chain(blocks)
        self._verified_upto = blocks[-1].block_hash if status.ok else None
        return status

    def audit_source(self, source_id: str) -> List[Transaction]:
        blocks = self.snapshot()
        if self._verified_upto is None or self._verified_upto != blocks[-1].block_hash:
            raise ChainNotVerifiedError("verify the chain at its current head before auditing")
        return audit_history(blocks, source_id)

    def to_bytes(self) -> bytes:
        return serialize_chain(self.snapshot())

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    def transactions(self) -> List[Transaction]:
        return [tx for blk in self.snapshot() for tx in blk.transactions]


"""Total-order block production.

The shipped backend is a single in-process crash-fault-tolerant sequencer
behind a small pluggable surface: submit transactions, cut blocks on size
or time-to-cut, hash-chain and sign the result.  Peers verify sequence,
chain hash and orderer signature on every delivered block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import crypto
from .encoding import ZERO_HASH, Reader, enc_bytes, enc_uint, sha256
from .txn import Transaction


class OrderingError(Exception):
    pass


class QueueClosed(OrderingError):
    pass


class OutOfSequence(OrderingError):
    pass


class HashMismatch(OrderingError):
    pass


class BadSignature(OrderingError):
    pass


@dataclass
class Block:
    seq: int
    txs: list
    consensus_meta: bytes = b""
    prev_hash: bytes = ZERO_HASH
    this_hash: bytes = b""
    orderer_sig: bytes = b""

    def header_bytes(self) -> bytes:
        out = enc_uint(self.seq)
        out += enc_uint(len(self.txs))
        for tx in self.txs:
            out += enc_bytes(tx.encode())
        out += enc_bytes(self.consensus_meta)
        out += enc_bytes(self.prev_hash)
        return out

    def compute_hash(self) -> bytes:
        return sha256(b"block:" + self.header_bytes())

    def seal(self, prev_hash: bytes, key: crypto.KeyPair) -> "Block":
        self.prev_hash = prev_hash
        self.this_hash = self.compute_hash()
        self.orderer_sig = key.sign(self.this_hash)
        return self

    def encode(self) -> bytes:
        return (
            self.header_bytes()
            + enc_bytes(self.this_hash)
            + enc_bytes(self.orderer_sig)
        )

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = Reader(data)
        seq = r.uint()
        n = r.uint()
        txs = [Transaction.decode(Reader(r.bytes_())) for _ in range(n)]
        meta = r.bytes_()
        prev_hash = r.bytes_()
        this_hash = r.bytes_()
        sig = r.bytes_()
        return cls(seq, txs, meta, prev_hash, this_hash, sig)


@dataclass
class OrdererConfig:
    block_size: int = 100
    block_timeout: float = 1000.0  # simulated ms since first pending tx

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.block_timeout <= 0:
            raise ValueError("block_timeout must be positive")


class Sequencer:
    """Single logical sequencer: FIFO pending queue, dedup by tx id,
    size/time-to-cut block cutting, hash chain and signature."""

    def __init__(self, config: OrdererConfig, key: crypto.KeyPair):
        self.config = config
        self.key = key
        self.pending: list[Transaction] = []
        self.seen: set[bytes] = set()
        self.blocks: list[Block] = []
        self.closed = False

    @property
    def next_seq(self) -> int:
        return len(self.blocks) + 1

    @property
    def prev_hash(self) -> bytes:
        return self.blocks[-1].this_hash if self.blocks else ZERO_HASH

    def submit(self, tx: Transaction) -> bool:
        """Accept a transaction into the total-order stream.  Returns
        False for a duplicate of already-accepted content."""
        if self.closed:
            raise QueueClosed("ordering service is shutting down")
        if tx.global_id in self.seen:
            return False
        self.seen.add(tx.global_id)
        self.pending.append(tx)
        return True

    def size_reached(self) -> bool:
        return len(self.pending) >= self.config.block_size

    def cut_block(self, trigger: str, expected_seq: int = None):
        """Cut the next block.  A duplicate time-to-cut (one whose target
        sequence was already produced) is ignored."""
        if trigger == "time-to-cut" and expected_seq is not None:
            if expected_seq != self.next_seq:
                return None  # duplicate time-to-cut for an older height
        if not self.pending:
            return None
        batch = self.pending[: self.config.block_size]
        self.pending = self.pending[len(batch) :]
        block = Block(self.next_seq, batch, consensus_meta=trigger.encode())
        block.seal(self.prev_hash, self.key)
        self.blocks.append(block)
        return block

    def blocks_from(self, seq: int) -> list[Block]:
        return [b for b in self.blocks if b.seq >= seq]

    def close(self):
        self.closed = True


def verify_block(
    block: Block, expected_seq: int, prev_hash: bytes, orderer_pub: bytes
) -> None:
    if block.seq != expected_seq:
        raise OutOfSequence(f"got block {block.seq}, expected {expected_seq}")
    if block.prev_hash != prev_hash:
        raise HashMismatch("previous-block hash does not chain")
    if block.compute_hash() != block.this_hash:
        raise HashMismatch("block hash does not recompute")
    if not crypto.verify(orderer_pub, block.orderer_sig, block.this_hash):
        raise BadSignature("orderer signature invalid")

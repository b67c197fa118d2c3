"""Signed client transactions.

Two wire shapes exist.  In the order-then-execute flow the client supplies
its own unique id and no snapshot height.  In the execute-order-in-parallel
flow the id is the hash of (username, invocation, snapshot height), which
makes two distinct transactions collide only if they are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import crypto
from .encoding import Reader, enc_bytes, enc_scalar_list, enc_str, enc_uint, sha256

# sentinel for "no snapshot height" (OE flow)
NO_HEIGHT = 2**64 - 1


@dataclass
class Transaction:
    username: str
    contract: str
    args: list
    snapshot_height: int = NO_HEIGHT
    nonce: int = 0  # client-chosen, distinguishes OE resubmissions
    global_id: bytes = b""
    client_sig: bytes = b""

    def content_bytes(self) -> bytes:
        return (
            enc_str(self.username)
            + enc_str(self.contract)
            + enc_scalar_list(self.args)
            + enc_uint(self.snapshot_height)
            + enc_uint(self.nonce)
        )

    def compute_id(self) -> bytes:
        return sha256(b"tx:" + self.content_bytes())

    def signed_bytes(self) -> bytes:
        return sha256(self.content_bytes() + enc_bytes(self.global_id))

    def seal(self, key: crypto.KeyPair) -> "Transaction":
        self.global_id = self.compute_id()
        self.client_sig = key.sign(self.signed_bytes())
        return self

    def verify_sig(self, public_bytes: bytes) -> bool:
        return crypto.verify(public_bytes, self.client_sig, self.signed_bytes())

    @property
    def is_eo(self) -> bool:
        return self.snapshot_height != NO_HEIGHT

    def encode(self) -> bytes:
        return (
            self.content_bytes()
            + enc_bytes(self.global_id)
            + enc_bytes(self.client_sig)
        )

    @classmethod
    def decode(cls, r: Reader) -> "Transaction":
        username = r.str_()
        contract = r.str_()
        args = r.scalar_list()
        snapshot_height = r.uint()
        nonce = r.uint()
        global_id = r.bytes_()
        sig = r.bytes_()
        return cls(username, contract, args, snapshot_height, nonce, global_id, sig)


def make_tx(
    key: crypto.KeyPair,
    username: str,
    contract: str,
    args: list,
    snapshot_height: int = NO_HEIGHT,
    nonce: int = 0,
) -> Transaction:
    return Transaction(username, contract, list(args), snapshot_height, nonce).seal(key)

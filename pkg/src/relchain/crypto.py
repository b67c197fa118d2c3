"""Ed25519 identities for clients, nodes and the orderer.

Keys are derived deterministically from a seed so that a scenario config
plus rng seed fully pins every signature in a run.
"""

from __future__ import annotations

import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class KeyPair:
    def __init__(self, private: Ed25519PrivateKey):
        self._private = private
        self.public_bytes = private.public_key().public_bytes_raw()

    @classmethod
    def from_seed(cls, seed) -> "KeyPair":
        if isinstance(seed, str):
            seed = seed.encode()
        raw = hashlib.sha256(b"relchain-key:" + seed).digest()
        return cls(Ed25519PrivateKey.from_private_bytes(raw))

    def sign(self, data: bytes) -> bytes:
        return self._private.sign(data)


def verify(public_bytes: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False

"""Canonical byte encoding shared by every node.

Block hashes, transaction ids, write-set hashes and state hashes are all
computed over these encodings, so they must be bit-identical everywhere.
Every field is length-prefixed (4-byte big-endian) and scalars carry a
one-byte type tag.
"""

from __future__ import annotations

import hashlib
from decimal import Decimal

HASH_LEN = 32
ZERO_HASH = b"\x00" * HASH_LEN

_TAG_INT = b"i"
_TAG_DEC = b"d"
_TAG_TEXT = b"t"
_TAG_BOOL = b"b"
_TAG_NONE = b"n"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def enc_bytes(b: bytes) -> bytes:
    return len(b).to_bytes(4, "big") + b


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


def enc_uint(n: int) -> bytes:
    return n.to_bytes(8, "big")


def enc_scalar(v) -> bytes:
    """Tagged encoding of a column/argument value."""
    if v is None:
        return enc_bytes(_TAG_NONE)
    if isinstance(v, bool):
        return enc_bytes(_TAG_BOOL + (b"\x01" if v else b"\x00"))
    if isinstance(v, int):
        return enc_bytes(_TAG_INT + str(v).encode())
    if isinstance(v, Decimal):
        return enc_bytes(_TAG_DEC + str(v).encode())
    if isinstance(v, str):
        return enc_bytes(_TAG_TEXT + v.encode("utf-8"))
    raise TypeError(f"unsupported scalar type: {type(v).__name__}")


def dec_scalar(b: bytes):
    tag, body = b[:1], b[1:]
    if tag == _TAG_NONE:
        return None
    if tag == _TAG_BOOL:
        return body == b"\x01"
    if tag == _TAG_INT:
        return int(body.decode())
    if tag == _TAG_DEC:
        return Decimal(body.decode())
    if tag == _TAG_TEXT:
        return body.decode("utf-8")
    raise ValueError(f"bad scalar tag: {tag!r}")


def enc_scalar_list(values) -> bytes:
    out = enc_uint(len(values))
    for v in values:
        out += enc_scalar(v)
    return out


class Reader:
    """Sequential decoder for the length-prefixed stream."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated stream")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def bytes_(self) -> bytes:
        n = int.from_bytes(self.take(4), "big")
        return self.take(n)

    def str_(self) -> str:
        return self.bytes_().decode("utf-8")

    def uint(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def scalar(self):
        return dec_scalar(self.bytes_())

    def scalar_list(self) -> list:
        n = self.uint()
        return [self.scalar() for _ in range(n)]

    def eof(self) -> bool:
        return self.pos >= len(self.data)

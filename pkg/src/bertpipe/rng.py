"""Keyed, counter-based randomness.

Every randomized decision in the data pipeline (train/test split, shard
assignment, within-shard order, mask sampling) is a pure function of a seed
plus the identity of the item being decided. That makes results independent
of processing order and worker count: any interleaving of the document
stream produces the same output.

Keys are derived by hashing a canonical encoding of the key parts with
BLAKE2b, so no generator state is shared between decisions.
"""

from __future__ import annotations

import hashlib
import random
import struct

KeyPart = int | str | bytes


def _encode_parts(parts: tuple[KeyPart, ...]) -> bytes:
    """Unambiguous byte encoding of a key tuple (type tag + length prefix)."""
    out = bytearray()
    for part in parts:
        if isinstance(part, bool):  # bool is an int subclass; reject to avoid surprises
            raise TypeError("bool key parts are ambiguous; use 0/1 or a string")
        if isinstance(part, int):
            raw = part.to_bytes(16, "little", signed=True)
            out += b"i" + raw
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            out += b"s" + struct.pack("<I", len(raw)) + raw
        elif isinstance(part, bytes):
            out += b"b" + struct.pack("<I", len(part)) + part
        else:
            raise TypeError(f"unsupported key part type: {type(part).__name__}")
    return bytes(out)


def derive_u64(*parts: KeyPart) -> int:
    """Derive a uniform 64-bit integer from the key parts."""
    digest = hashlib.blake2b(_encode_parts(parts), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def keyed_uniform(*parts: KeyPart) -> float:
    """Uniform float in [0, 1) derived from the key parts."""
    # 53 bits of the hash, same construction as random.Random.random().
    return (derive_u64(*parts) >> 11) / float(1 << 53)


def keyed_rng(*parts: KeyPart) -> random.Random:
    """A private ``random.Random`` seeded from the key parts.

    Use when a decision needs several draws (sampling without replacement,
    shuffles). The generator is independent of all other keys.
    """
    return random.Random(derive_u64(*parts))

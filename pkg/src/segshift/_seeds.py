"""Deterministic seed derivation and RNG construction.

All randomness in the package flows through explicitly seeded Philox
(counter-based) generators. Sub-seeds are derived by hashing, never by
drawing from a shared stream, so independent fits stay independent of
evaluation order and can run concurrently.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *parts) -> int:
    """Derive a 64-bit sub-seed from a master seed and context parts.

    Parts may be ints, strings, or bytes. The derivation is stable across
    processes and platforms (blake2b, not the salted builtin hash).
    """
    mask = (1 << 64) - 1
    h = hashlib.blake2b(digest_size=8)
    h.update((int(seed) & mask).to_bytes(8, "little"))
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"b" + part)
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        else:
            h.update(b"i" + (int(part) & mask).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def index_digest(indices: np.ndarray) -> bytes:
    """Stable digest of a row-index set, independent of input order."""
    arr = np.sort(np.asarray(indices, dtype=np.int64))
    return hashlib.blake2b(arr.tobytes(), digest_size=8).digest()


def make_rng(seed: int, *parts) -> np.random.Generator:
    """Philox generator seeded from ``derive_seed(seed, *parts)``."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, *parts)))

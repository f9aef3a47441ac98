"""Deterministic seed derivation.

All randomness in the toolkit flows from a single experiment seed through
labeled derivations, so that any stage can be re-run in isolation and
reproduce its part of the pipeline bit-identically.
"""

from __future__ import annotations

import hashlib

_SEED_SPACE = 2**31 - 1


def stable_hash(text: str) -> int:
    """Process-independent 31-bit hash of a string (builtin hash() is salted)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % _SEED_SPACE


def derive_seed(base_seed: int, *labels: str) -> int:
    """Derive a child seed from a base seed and a label path.

    Same (base_seed, labels) always yields the same child; different labels
    decorrelate stages sharing one experiment seed.
    """
    material = ":".join([str(int(base_seed)), *labels])
    return stable_hash(material)


def clip_seed(base_seed: int, clip_path: str) -> int:
    """Per-clip seed: base xor stable hash of the clip path."""
    return (int(base_seed) ^ stable_hash(clip_path)) % _SEED_SPACE

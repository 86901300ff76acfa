"""Deterministic seed derivation for independent RNG streams."""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 32-bit seed for a named component.

    Hash-based so the stream a component sees depends only on (root_seed,
    name), not on how many other components drew seeds before it. Uses
    sha256, not the salted builtin hash.
    """
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")

"""Seed derivation: every per-request seed comes from one run seed."""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, persona_id: str, stage: str) -> int:
    """Non-negative 63-bit seed from the first 8 bytes of SHA-256("seed:persona_id:stage")."""
    digest = hashlib.sha256(f"{seed}:{persona_id}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1

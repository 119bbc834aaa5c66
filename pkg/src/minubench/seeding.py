"""Deterministic seed derivation for trials run in any order or process."""

from __future__ import annotations

import hashlib
import math

import numpy as np


def derive_seed(*parts: object) -> int:
    """Hash an ordered tuple of identifiers into a 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero (Python's round() ties to even)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))

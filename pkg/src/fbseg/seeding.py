"""Deterministic stream derivation for every random draw in the package.

All randomness flows through counter-based Philox generators keyed by
SHA-256 digests of (domain, *components) tuples, so any instance, model or
experiment can be regenerated bit-identically from its seed components, in
any order and on any worker.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def _digest(*parts) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(_SEP)
    return h.digest()


def derive_key(*parts) -> int:
    """128-bit Philox key derived from the given components."""
    return int.from_bytes(_digest(*parts)[:16], "little")


def derive_seed64(*parts) -> int:
    """64-bit integer derived from the given components."""
    return int.from_bytes(_digest(*parts)[:8], "little")


def stream(*parts) -> np.random.Generator:
    """A fresh counter-based generator for the given stream identity."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))

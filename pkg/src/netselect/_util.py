"""Small shared helpers: deterministic seed derivation and input checks."""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts, base: int = 0) -> int:
    """Derive a 64-bit seed from arbitrary parts, keyed by ``base``.

    Arrays contribute their raw bytes, so the result is a pure function of
    the numeric content. Used to make quasi-Monte Carlo evaluations
    deterministic given a chain seed, independent of call order.
    """
    h = hashlib.blake2b(digest_size=8, key=int(base).to_bytes(8, "little", signed=False))
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        elif isinstance(p, (bytes, bytearray)):
            h.update(p)
        elif isinstance(p, str):
            h.update(p.encode())
        elif isinstance(p, (int, np.integer)):
            h.update(int(p).to_bytes(8, "little", signed=True))
        elif isinstance(p, float):
            h.update(np.float64(p).tobytes())
        else:
            raise TypeError(f"unhashable seed part of type {type(p)!r}")
    return int.from_bytes(h.digest(), "little")


def require_finite(name: str, arr) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a

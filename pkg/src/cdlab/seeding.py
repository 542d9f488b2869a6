"""Deterministic seed derivation (splitmix64 finalizer chained over keys)."""

from __future__ import annotations

import zlib

_MASK = (1 << 64) - 1


def _mix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Child seed for ``keys`` under ``seed``; strings hash by CRC32 of UTF-8."""
    x = _mix(int(seed) & _MASK)
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        x = _mix(x ^ (int(key) & _MASK))
    return x >> 1  # keep it a non-negative 63-bit int

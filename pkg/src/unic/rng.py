"""Seeded random number generation and seed derivation.

All randomness in the package flows through PCG64 generators constructed
here, so every command is bit-reproducible from a single 64-bit seed.
Derived seeds are stable hashes of (seed, label), which makes per-sample
and per-parameter streams independent of iteration or worker order.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit sub-seed for (seed, labels).

    Uses BLAKE2b so the result does not depend on Python's per-process
    hash randomization or on the order in which sub-seeds are requested.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def derived_rng(seed: int, *labels) -> np.random.Generator:
    return make_rng(derive_seed(seed, *labels))


def worker_count() -> int:
    """Worker cap for internal thread pools, from UNIC_THREADS."""
    env = os.environ.get("UNIC_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"UNIC_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1

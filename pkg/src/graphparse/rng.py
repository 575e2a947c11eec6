"""Counter-based random streams keyed by (seed, purpose, index).

Every stochastic decision in the package draws from its own stream, so a
single sample, parameter or schedule entry can be reproduced in isolation
without replaying anything that came before it.
"""
import hashlib

import numpy as np


def _key(seed: int, tag: str, index: int) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(16, "little", signed=True))
    h.update(tag.encode("utf-8"))
    h.update(b"\x00")
    h.update(int(index).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, tag, index)``."""
    return np.random.Generator(np.random.Philox(key=_key(seed, tag, index)))


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """A 63-bit integer seed derived from the same key schedule."""
    return _key(seed, tag, index) & ((1 << 63) - 1)

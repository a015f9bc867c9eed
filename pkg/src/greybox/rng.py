"""Named, deterministic random streams.

Every stochastic component draws from a generator derived from
``(seed, name)``.  Names are hashed with SHA-256 so that streams do not
depend on Python's salted ``hash`` or on the order in which they are
requested, which keeps parallel and serial runs identical.
"""

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a fresh generator for the stream ``name`` under ``seed``."""
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed, *_name_words(name)]))


def derive_seed(seed: int, name: str) -> int:
    """Derive a 63-bit child seed for ``name``."""
    return int(stream(seed, name).integers(0, 2**63 - 1))

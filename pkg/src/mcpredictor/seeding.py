"""Named random streams derived from a single seed.

Every stochastic component (parameter init, batch shuffling, dropout,
synthetic generation) pulls its own generator via `stream(seed, name)`,
so perturbing one component never shifts the randomness of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream `name` of the run seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _name_key(name)])))

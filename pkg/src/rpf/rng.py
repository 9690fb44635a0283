"""Deterministic named random streams.

Every random draw in the package flows from one root seed through named
substreams (data generation, weight init, batch shuffling, ...), so
components can be re-seeded independently and any draw can be reproduced
in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str | int) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(root_seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the stream identified by (root_seed, *names).

    Streams with different names are statistically independent; the same
    (seed, names) pair always yields the same draw sequence.
    """
    key = tuple(_name_key(n) for n in names)
    seq = np.random.SeedSequence(entropy=root_seed, spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))

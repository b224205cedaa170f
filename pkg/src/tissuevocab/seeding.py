"""Named random substreams derived from a single root seed.

``rng(seed, "sampling", subject_id)`` always yields the same generator for the
same arguments, independent of call order or thread scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: object) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(seed: int, *names: object) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_name_key(n) for n in names))


def rng(seed: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *names))


def child_seed(seed: int, *names: object) -> int:
    """A plain integer seed for APIs that take ints (e.g. per-tree seeds)."""
    return int(seed_sequence(seed, *names).generate_state(1, dtype=np.uint32)[0])

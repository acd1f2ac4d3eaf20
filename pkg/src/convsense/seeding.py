"""Named random streams derived from one top-level seed."""

import zlib

import numpy as np


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Seed sequence for the stream ``name`` under ``seed``.

    Streams with different names are statistically independent, and adding a
    new stream never perturbs existing ones.
    """
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def int_seed(seed: int, name: str) -> int:
    """A 63-bit integer seed, for libraries that want a plain int (torch)."""
    return int(stream_seed(seed, name).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

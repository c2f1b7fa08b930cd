"""Named random streams derived from one master seed.

Each stream is keyed by the CRC-32 of its name, so a stream's sequence
depends only on (master seed, name). Adding a stream never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(master_seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master_seed, name))


def stream_ints(master_seed: int, name: str, count: int) -> list[int]:
    """``count`` 63-bit integers from the named stream, e.g. scene or episode seeds."""
    return [int(v) for v in stream(master_seed, name).integers(0, 2**63 - 1, size=count)]


def indexed_seed(master_seed: int, name: str, index: int) -> int:
    """Seed number ``index`` of the named stream, computable without drawing the ones before it."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(zlib.crc32(name.encode("utf-8")), int(index)))
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))

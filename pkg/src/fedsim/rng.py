"""Counter-based random streams keyed by (seed, domain, round, client)."""

from __future__ import annotations

import zlib

import numpy as np


def _tag(domain: str) -> int:
    return zlib.crc32(domain.encode("utf-8"))


def rng_substream(seed: int, domain: str, round: int = -1, client_id: int = -1) -> np.random.Generator:
    """Independent Philox stream for one key.

    The stream depends only on the key, never on how many draws other
    streams have made, so serial and parallel runs see identical numbers.
    Negative ``round``/``client_id`` mean "not applicable".
    """
    key = [int(seed) & 0xFFFFFFFF, int(seed) >> 32 & 0xFFFFFFFF, _tag(domain), int(round) + 1, int(client_id) + 1]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

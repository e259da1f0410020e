"""Deterministic named RNG substreams.

All randomness in the package flows from one root seed through named substreams,
so adding a consumer never perturbs the draws of an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(root_seed: int, *names: str) -> np.random.Generator:
    """Generator for a named substream of `root_seed`.

    The name path hashes to a stable spawn key (crc32 is platform independent),
    so substream(7, "worlds") is the same stream on every run and machine.
    """
    key = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=key))

"""Deterministic RNG derivation: every stream hangs off one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Named child generator of ``seed``.

    Tags may be strings or ints; strings are CRC-folded so the derivation is
    stable across processes and platforms (unlike the builtin hash()).
    """
    words = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.default_rng(words)

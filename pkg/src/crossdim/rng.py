"""Counter-based random streams keyed by (seed, purpose, index)."""

from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return an independent Philox generator for one stochastic purpose.

    The same ``(seed, tag, index...)`` always yields the same stream, no matter
    what other streams were drawn before, which is what makes runs resumable
    and sample generation order-independent.
    """
    words = [int(seed) & 0xFFFFFFFF, _tag_word(tag)]
    words.extend(int(i) & 0xFFFFFFFF for i in index)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

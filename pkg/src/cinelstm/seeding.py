"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def substream(root: int, *names) -> np.random.Generator:
    """Generator for the stream ``root / names[0] / names[1] / ...``.

    The same path always yields the same stream; distinct paths are
    statistically independent.
    """
    seq = np.random.SeedSequence(int(root), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(seq)


def substream_seed(root: int, *names) -> int:
    return int(substream(root, *names).integers(0, 2**31 - 1))

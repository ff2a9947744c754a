"""Named random substreams derived from one master seed.

Every source of randomness in the pipeline draws from a substream addressed
by a path of names and integers (e.g. ``("sampler", epoch, batch)``), so no
two components ever consume the same stream and all results are reproducible
from the single master seed.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = 0xFFFFFFFF


def _key(path: tuple) -> tuple[int, ...]:
    out = []
    for part in path:
        if isinstance(part, str):
            out.append(zlib.crc32(part.encode("utf-8")) & _MASK)
        else:
            out.append(int(part) & _MASK)
    return tuple(out)


def substream(master_seed: int, *path) -> np.random.Generator:
    """Return a Generator for the substream addressed by ``path``.

    Path components may be strings (hashed) or non-negative integers.
    The same (master_seed, path) always yields the same stream.
    """
    seq = np.random.SeedSequence(int(master_seed), spawn_key=_key(path))
    return np.random.default_rng(seq)

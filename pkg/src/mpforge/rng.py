"""Named, splittable random streams.

Every random draw in the library comes from a :class:`numpy.random.Generator`
built on the counter-based Philox bit generator. A stream is identified by a
top-level integer seed plus a slash-separated name such as ``"trial/7/matrix"``.
The name is hashed into the spawn key of a :class:`numpy.random.SeedSequence`,
so two different names give statistically independent streams and the same
``(seed, name)`` pair always reproduces the same stream, whatever process or
worker evaluates it.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "derive_seed"]


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str = "") -> np.random.Generator:
    """Return the generator for ``(seed, name)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=_name_key(name))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, name: str) -> int:
    """Derive a child 63-bit integer seed, handy for records and sub-experiments."""
    ss = np.random.SeedSequence(int(seed), spawn_key=_name_key(name))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))

"""Counter-based, splittable random streams.

Every consumer of randomness asks for a stream by ``(master_seed, stream_id)``.
Streams are Philox generators keyed through :class:`numpy.random.SeedSequence`,
so the same pair always yields the same sequence and distinct ids are
independent. Stream ids may be ints, strings, or tuples of either, which lets
call sites name streams like ``("filter", "noise", step)``.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

StreamId = Union[int, str, tuple]


def _words(stream_id: StreamId) -> tuple[int, ...]:
    if isinstance(stream_id, tuple):
        out: tuple[int, ...] = ()
        for part in stream_id:
            out += _words(part)
        return out
    if isinstance(stream_id, (int, np.integer)):
        if stream_id < 0:
            raise ValueError("integer stream ids must be non-negative")
        return (int(stream_id),)
    digest = hashlib.sha256(str(stream_id).encode("utf-8")).digest()
    return (int.from_bytes(digest[:8], "little"),)


def rng_stream(master_seed: int, stream_id: StreamId = 0) -> np.random.Generator:
    """Return the deterministic generator for ``(master_seed, stream_id)``."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=_words(stream_id))
    return np.random.Generator(np.random.Philox(seq))

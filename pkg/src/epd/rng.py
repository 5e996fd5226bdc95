"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, stream_id)``; the draw
index is Philox's internal counter. Streams with different ids are
independent, and a stream is reproducible from its key alone, so work can be
split across processes without sharing generator state.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(stream_id) -> int:
    """Map an int or string stream id to a 64-bit integer."""
    if isinstance(stream_id, (int, np.integer)):
        return int(stream_id) & _MASK64
    digest = hashlib.blake2b(str(stream_id).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``(seed, stream...)``. Multi-part ids are hashed together."""
    if len(stream) == 1:
        sid = stream_key(stream[0])
    else:
        sid = stream_key("/".join(str(s) for s in stream))
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, sid]))


def rng_normal(shape, stream_id, seed: int) -> np.ndarray:
    """I.i.d. standard normals, deterministic in ``(stream_id, seed)``."""
    return make_rng(seed, stream_id).standard_normal(shape)

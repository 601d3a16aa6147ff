"""
Reproducible random streams.

Every random draw in the toolkit comes from a numpy Generator backed by the
counter-based Philox bit generator. The Philox key is derived from a stable
hash of (seed, scene_index, purpose), so a scene's stream depends only on
those three values: never on process, worker count or call order.
"""
import hashlib
from typing import Optional

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, scene_index: Optional[int] = None, purpose: str = "") -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed) & _MASK64).encode("ascii"))
    h.update(b"/")
    h.update(b"-" if scene_index is None else str(int(scene_index)).encode("ascii"))
    h.update(b"/")
    h.update(purpose.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def substream(seed: int, scene_index: Optional[int] = None, purpose: str = "") -> np.random.Generator:
    """Generator for one (seed, scene, purpose) triple."""
    key = stream_key(seed, scene_index, purpose)
    return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng=None, seed: Optional[int] = None, purpose: str = "") -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is not None:
        seed = int(rng)
    return substream(0 if seed is None else seed, None, purpose)

"""Named, seeded random streams.

Every consumer of randomness asks for its own stream by name, so changing how one
stream is used (data order, drop-path, a parameter's init) never shifts another.
Streams use numpy's counter-based Philox generator keyed by ``(seed, hash(name))``.
"""

import hashlib
import math

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for sub-stream ``name`` of ``seed``."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    key = ((int(seed) & _MASK64) << 64) | int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def uniform_fan_in(seed: int, name: str, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """Draw ``shape`` values from U(-1/sqrt(fan_in), +1/sqrt(fan_in)) on stream ``init/<name>``."""
    bound = 1.0 / math.sqrt(fan_in)
    return stream(seed, f"init/{name}").uniform(-bound, bound, size=shape).astype(dtype)


def child_seed(seed: int, name: str) -> int:
    """Derive a 63-bit integer seed for an independent sub-task (e.g. one synthetic sample)."""
    return int(stream(seed, name).integers(0, 2**63 - 1))

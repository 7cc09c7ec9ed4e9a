"""Deterministic seed derivation.

Every random draw in the pipeline comes from a numpy Generator created
here. Seeds for sub-tasks are derived from a root seed plus string tags,
so the same (seed, tag path) always yields the same stream regardless of
execution order or worker partitioning.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_seed", "rng_from", "normal_tensor"]

_MOD = 2**31 - 1


def derive_seed(root: int, *tags: str | int) -> int:
    """Derive a child seed from a root seed and a path of tags."""
    keys = [int(root) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, int):
            keys.append(t & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(t.encode("utf-8")))
    ss = np.random.SeedSequence(entropy=keys[0], spawn_key=tuple(keys[1:]))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % _MOD)


def rng_from(root: int, *tags: str | int) -> np.random.Generator:
    """Philox generator for the derived seed (counter-based, splittable)."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root, *tags)))


def normal_tensor(shape, rng: np.random.Generator, scale: float = 1.0, dtype=None):
    """Standard-normal torch tensor drawn from a numpy generator."""
    import torch

    arr = rng.standard_normal(size=shape) * scale
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if dtype is not None:
        t = t.to(dtype)
    else:
        t = t.to(torch.float32)
    return t

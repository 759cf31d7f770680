"""Seeded random streams.

Every random matrix is drawn from numpy's PCG64 bit generator followed by
``Generator.standard_normal``, which numpy guarantees to be stable for a fixed
seed across platforms.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

ALGORITHM = "numpy.PCG64/standard_normal"
_MASK64 = (1 << 64) - 1
# odd 64-bit constants used to spread iteration/attempt counters over the seed space
_ITER_MIX = 0x9E3779B97F4A7C15
_ATTEMPT_MIX = 0xC2B2AE3D27D4EB4F


@dataclass(frozen=True)
class SeededRng:
    seed: int
    algorithm: str = ALGORITHM

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, rows: int, cols: int) -> np.ndarray:
        return self.generator().standard_normal((rows, cols))

    def derive(self, iteration: int = 1, attempt: int = 0) -> "SeededRng":
        """Stream for one optimizer iteration.

        Iteration 1, attempt 0 is the base seed itself; later iterations and
        retries get distinct seeds.
        """
        offset = ((iteration - 1) * _ITER_MIX + attempt * _ATTEMPT_MIX) & _MASK64
        return SeededRng(self.seed ^ offset)


def stable_hash(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def tensor_seed(global_seed: int, name: str) -> int:
    """Per-tensor seed, independent of the order tensors are processed in."""
    return (int(global_seed) ^ stable_hash(name)) & _MASK64

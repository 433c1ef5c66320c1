"""Deterministic random streams.

Every stochastic component (weight init, shuffling, dropout masks,
augmentation draws, undersampling) pulls from an `Rng`. The generator is
fixed for the whole artifact: NumPy's PCG64, seeded through SeedSequence,
whose bit stream is stable across runs and platforms for a given seed.

Derived streams mix extra integer/string keys into the seed material, so
per-sample or per-epoch streams are reproducible regardless of evaluation
order or threading.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & _U64
    if isinstance(key, str):
        digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"rng keys must be int or str, got {type(key).__name__}")


class Rng:
    """A named deterministic generator: same seed, same sequence, anywhere."""

    algorithm = "numpy-pcg64"

    def __init__(self, seed: int, _entropy: tuple[int, ...] | None = None):
        self._entropy = _entropy if _entropy is not None else (int(seed) & _U64,)
        self.seed = self._entropy[0]
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(list(self._entropy)))
        )

    def derive(self, *keys: int | str) -> "Rng":
        """Independent child stream keyed by `keys` (ints or strings)."""
        extra = tuple(_key_to_int(k) for k in keys)
        return Rng(self.seed, _entropy=self._entropy + extra)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self._entropy[1:]})"

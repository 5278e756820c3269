"""Seeded random streams with deterministic child derivation."""
from __future__ import annotations

import zlib

import numpy as np

from .errors import ContractError


def _spawn_key(keys: tuple) -> tuple[int, ...]:
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode("utf-8")))
        elif isinstance(k, (int, np.integer)):
            if k < 0:
                raise ContractError(f"rng child keys must be non-negative, got {k}")
            out.append(int(k))
        else:
            raise ContractError(f"rng child keys must be int or str, got {type(k).__name__}")
    return tuple(out)


class Rng:
    """PCG64 stream wrapper; identical seed and call sequence give identical output."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        if not isinstance(seed, (int, np.integer)) or seed < 0 or seed >= 2**64:
            raise ContractError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, *keys) -> "Rng":
        """Derive an independent stream; same (seed, keys) always gives the same stream."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=_spawn_key(keys))
        return Rng(self.seed, _seq=seq)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray | float:
        if shape is None:
            return float(self._gen.normal() * scale)
        return self._gen.normal(size=shape) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        if shape is None:
            return float(self._gen.uniform(low, high))
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        if shape is None:
            return int(self._gen.integers(low, high))
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]

    def state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

"""Seeded, splittable random streams on top of numpy's counter-based Philox."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngState:
    """A (seed, stream) pair naming one reproducible draw sequence.

    Streams derived with :meth:`child` depend only on the parent's identity
    and the child label, never on how many draws were taken elsewhere.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def child(self, *label) -> "RngState":
        return RngState(self.seed, _mix(self.stream, *label))

    def generator(self) -> np.random.Generator:
        key = self.seed | (self.stream << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stream": self.stream}

    @classmethod
    def from_dict(cls, d: dict) -> "RngState":
        return cls(int(d["seed"]), int(d["stream"]))


def as_rng(seed) -> RngState:
    if isinstance(seed, RngState):
        return seed
    return RngState(int(seed))

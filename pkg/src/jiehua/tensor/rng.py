"""Seeded random streams.

Streams come from numpy's PCG64 bit generator, whose output sequence is
specified by the algorithm and identical on every platform. Child streams are
derived with ``SeedSequence`` spawn keys so that adding a consumer in one
place never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int = 0, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str | int) -> "Rng":
        """Independent stream identified by ``name``; stable across runs."""
        k = name if isinstance(name, int) else zlib.crc32(str(name).encode())
        return Rng(self.seed, self._key + (k,))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape, dtype=np.float32) * np.float32(scale)).astype(
            np.float32
        )

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        out = self._gen.uniform(low, high, shape)
        return out if shape is None else out.astype(np.float32)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low: int, high: int | None = None, shape=None):
        return self._gen.integers(low, high, shape)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self._key), "bitgen": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        if state["seed"] != self.seed or tuple(state["key"]) != self._key:
            raise ValueError("rng state belongs to a different stream")
        self._gen.bit_generator.state = state["bitgen"]

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        r = cls(state["seed"], tuple(state["key"]))
        r.set_state(state)
        return r

"""Seeded random streams.

Every simulation draws from a Philox4x64 counter-based generator. Replication
``r`` of a sweep seeded with ``seed`` uses ``RandomStream(seed, r)``, which is
numpy's ``SeedSequence(seed, spawn_key=(r,))``; the raw 64-bit output of
Philox is stable across numpy releases, so traces are reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "philox4x64"
GENERATOR_VERSION = 1
_CHUNK = 1 << 16


class RandomStream:
    def __init__(self, seed: int, substream: int | None = None):
        self.seed = int(seed)
        self.substream = substream
        spawn_key = () if substream is None else (int(substream),)
        self.seed_sequence = np.random.SeedSequence(self.seed, spawn_key=spawn_key)
        self.bit_generator = np.random.Philox(self.seed_sequence)
        self.generator = np.random.Generator(self.bit_generator)
        self._buf = np.empty(0, dtype=np.uint64)
        self._pos = 0

    @classmethod
    def substream_of(cls, seed: int, replication: int) -> RandomStream:
        return cls(seed, replication)

    def describe(self) -> dict:
        return {
            "generator": GENERATOR_NAME,
            "version": GENERATOR_VERSION,
            "seed": self.seed,
            "substream": self.substream,
        }

    def raw(self, min_free: int) -> tuple[np.ndarray, int]:
        """Buffer of raw 64-bit draws holding at least ``min_free`` unread values.

        Callers consume from the returned position and report back through
        :meth:`consumed`; unread values are carried over, never discarded.
        """
        free = self._buf.shape[0] - self._pos
        if free < min_free:
            fresh = self.bit_generator.random_raw(max(_CHUNK, min_free))
            self._buf = np.concatenate([self._buf[self._pos:], fresh])
            self._pos = 0
        return self._buf, self._pos

    def consumed(self, pos: int) -> None:
        self._pos = int(pos)

    def uniform(self) -> float:
        buf, pos = self.raw(1)
        self.consumed(pos + 1)
        return float(buf[pos] >> np.uint64(11)) * (1.0 / 9007199254740992.0)

    def choice(self, candidates: np.ndarray, k: int) -> np.ndarray:
        """``k`` distinct elements of ``candidates``, uniformly without replacement."""
        if k == 0:
            return candidates[:0]
        return self.generator.choice(candidates, size=k, replace=False)

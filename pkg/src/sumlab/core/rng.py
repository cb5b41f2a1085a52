"""Counter-based random streams keyed by ``(seed, stream_id)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngContract:
    """Reproducible random stream.

    Backed by Philox, a keyed counter-based generator: the 128-bit key is the
    pair ``(seed, stream_id)`` and the counter starts at zero, so equal pairs
    give bit-identical sequences and distinct stream ids give separate
    keystreams without any shared state.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, stream_id: int) -> "RngContract":
        """Same seed, different stream."""
        return RngContract(self.seed, stream_id)


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngContract`, a ``Generator`` or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngContract):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngContract(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")

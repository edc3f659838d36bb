"""Counter-based deterministic random streams.

Every source of randomness in the library flows through an :class:`RngStream`
keyed by ``(seed, stream_id)``.  Streams with the same key replay the same
sequence bit for bit; streams with distinct keys are statistically
independent.  Substreams are derived by hashing indices into the stream id,
so results do not depend on scheduling or batch composition.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (used only for key derivation)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A Philox-backed random stream with derivable substreams.

    The 128-bit Philox key is ``(seed << 64) | stream_id``, so the pair fully
    determines the stream.  Successive draws advance an internal counter; two
    streams constructed from the same key produce identical outputs.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = (self.seed << 64) | self.stream_id
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *indices: int) -> "RngStream":
        """Derive an independent substream keyed by the given indices.

        ``child(a, b)`` equals ``child(a).child(b)``, which lets callers build
        stable per-rollout / per-step stream trees.
        """
        if not indices:
            raise ValueError("child() requires at least one index")
        sid = self.stream_id
        for ix in indices:
            sid = _splitmix64(sid ^ _splitmix64(int(ix) & _MASK64))
        return RngStream(self.seed, sid)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def gaussian(rng: RngStream, shape) -> np.ndarray:
    """Draw i.i.d. standard normal entries of the given (nonempty) shape."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    return rng.normal(shape)

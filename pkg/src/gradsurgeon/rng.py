"""Deterministic random streams.

All randomness in the toolkit flows through :class:`RngState`, a thin wrapper
around numpy's counter-based Philox generator.  Philox output is a pure
function of (key, counter), so equal seeds give equal draw sequences on every
platform, and independent streams can be forked by hashing a purpose tag into
a fresh key instead of splitting a mutable global state.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngState:
    """Seeded random stream with stable, order-independent forking.

    ``fork(*tags)`` derives a child stream whose key depends only on the
    parent key and the tags, never on how many draws the parent has made.
    Parallel consumers therefore see the same numbers regardless of the
    order in which streams are created or consumed.
    """

    def __init__(self, seed: int, _key: int | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = self.seed if _key is None else _key
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def fork(self, *tags) -> "RngState":
        material = repr((self._key,) + tags).encode("utf-8")
        key = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
        return RngState(self.seed, _key=key)

    # Draw methods delegate to the generator; only the ones the toolkit
    # needs are exposed, all returning float64 / int64.

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self):
        return f"RngState(seed={self.seed}, key={self._key:#x})"

"""Deterministic random numbers.

All stochastic choices in the package flow through SeededRng, a thin wrapper
around numpy's Philox bit generator.  Philox is counter-based and keyed, so a
given (seed, split path) produces the same stream on every platform, and
independent substreams can be derived without consuming draws from the parent.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little"))
    for label in path:
        h.update(b"/")
        h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Splittable deterministic RNG.

    :param seed: unsigned 64-bit seed; wider ints are masked down.

    Substreams are derived with :meth:`split`, which hashes the seed together
    with the label path, so sibling streams never overlap and reordering calls
    to one stream does not disturb another.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = _path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, _path)))

    def split(self, label: str) -> "SeededRng":
        """Derive an independent child stream named by ``label``."""
        return SeededRng(self.seed, self.path + (str(label),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __getattr__(self, name):
        # delegate draw methods (normal, integers, permutation, ...) to numpy
        return getattr(self._gen, name)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={'/'.join(self.path) or '.'})"

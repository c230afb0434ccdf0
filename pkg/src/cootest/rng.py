"""Deterministic 64-bit random streams.

All stochastic behavior in the harness flows through SplitMix64 streams so
that a (scene_id, operator kind, seed) triple reproduces bit-identical
output on any platform.  The state transition is the classic splitmix64
step: state advances by a fixed odd constant and the output is a
xor-shift-multiply finalizer of the new state.
"""

from __future__ import annotations

from typing import Iterable, Union

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

Token = Union[int, str]


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *tokens: Token) -> int:
    """Absorb labeling tokens into a base seed.

    Strings are absorbed as UTF-8 in 8-byte little-endian chunks, integers
    as their 64-bit value.  Used to carve independent substreams, e.g.
    derive_seed(spec.seed, scene_id, kind, agent_id).
    """
    state = seed & _MASK
    for token in tokens:
        if isinstance(token, str):
            raw = token.encode("utf-8")
            chunks = [
                int.from_bytes(raw[i : i + 8], "little") for i in range(0, len(raw), 8)
            ] or [0]
            chunks.append(len(raw))
        else:
            chunks = [int(token) & _MASK]
        for chunk in chunks:
            state = _finalize((state ^ chunk) + _GAMMA & _MASK)
    return state


class SplitMix64:
    """A single splitmix64 stream; never share one across invocations."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _finalize(self._state)

    def _block_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        self._state = (self._state + n * _GAMMA) & _MASK
        z = states
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def random(self, n: int | None = None):
        """Uniform float64 in [0, 1): scalar, or a length-n array."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self._block_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float, n: int | None = None):
        return lo + (hi - lo) * self.random(n)

    def randbelow(self, bound: int) -> int:
        """Uniform integer in [0, bound), rejection-sampled (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        mask = (1 << bound.bit_length()) - 1
        while True:
            value = self.next_u64() & mask
            if value < bound:
                return value

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniform over subsets, ordered."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} from {n}")
        keys = self.random(n) if n else np.empty(0)
        picked = np.argsort(keys, kind="stable")[:k]
        return np.sort(picked)

    def shuffled(self, items: Iterable) -> list:
        items = list(items)
        keys = self.random(len(items)) if items else np.empty(0)
        order = np.argsort(keys, kind="stable")
        return [items[i] for i in order]

"""Deterministic pseudo-random primitives shared by splitting and training.

Split membership and shuffle order must be reproducible from a seed alone,
independent of Python version, platform, or library internals.  This module
therefore pins the exact generator instead of delegating to ``random`` or
NumPy.

Algorithm (all arithmetic mod 2**64):

* State update: xorshift64* (Marsaglia):
  ``s ^= s >> 12;  s ^= s << 25;  s ^= s >> 27;  output = s * 0x2545F4914F6CDD1D``
* Seeding: one splitmix64 step over the user seed, so nearby seeds produce
  unrelated streams.  A zero state (the xorshift fixed point) is remapped to
  the splitmix64 increment ``0x9E3779B97F4A7C15``.
* Bounded draws use rejection sampling below the largest multiple of the
  bound, so every value in ``[0, bound)`` is exactly equally likely.
* Shuffling is the Fisher-Yates backward walk:
  ``for i = n-1 .. 1: j = next_below(i + 1); swap(items[i], items[j])``.
"""

from __future__ import annotations

MASK64 = 0xFFFFFFFFFFFFFFFF

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
_SPLITMIX_MUL2 = 0x94D049BB133111EB
_XORSHIFT_MUL = 0x2545F4914F6CDD1D

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    """One splitmix64 output step for the 64-bit input ``x``."""
    z = (x + _SPLITMIX_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * _SPLITMIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _SPLITMIX_MUL2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used to fold strings (e.g. label names) into seeds."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def mix_seed(seed: int, token: str = "") -> int:
    """Derive a stream seed from ``seed`` and an optional string token.

    Used to give each label (or pipeline stage) its own independent stream
    while keeping everything a pure function of the run seed.
    """
    h = fnv1a64(token.encode("utf-8")) if token else 0
    return splitmix64((seed & MASK64) ^ h)


class Xorshift64Star:
    """xorshift64* generator with splitmix64 seeding (see module docstring)."""

    def __init__(self, seed: int) -> None:
        state = splitmix64(seed & MASK64)
        self._state = state if state != 0 else _SPLITMIX_GAMMA

    def next_u64(self) -> int:
        s = self._state
        s ^= (s >> 12)
        s = (s ^ (s << 25)) & MASK64
        s ^= (s >> 27)
        self._state = s
        return (s * _XORSHIFT_MUL) & MASK64

    def next_below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` via rejection sampling."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        limit = (MASK64 + 1) - ((MASK64 + 1) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound

    def next_float(self) -> float:
        """Uniform float in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        """A shuffled copy of ``range(n)``."""
        idx = list(range(n))
        self.shuffle(idx)
        return idx

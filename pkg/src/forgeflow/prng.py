"""Portable pseudo-random primitives used wherever cross-run (and
cross-implementation) bit-reproducibility matters: bootstrap resampling and
per-segment seed derivation.

The generator is SplitMix64 (Steele, Lea & Flood 2014), defined by

    state' = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state'
    z = ((z xor (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z xor (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output = z xor (z >> 31)

Floats are built from the top 53 bits: u = (output >> 11) / 2^53, giving
u in [0, 1). Bounded integers are floor(u * n). Any implementation of this
recurrence reproduces the same streams for the same seed.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(state: int) -> tuple[int, int]:
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


class SplitMix64:
    """Stateful SplitMix64 stream over a 64-bit seed."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state, out = _mix(self.state)
        return out

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def next_below(self, n: int) -> int:
        """Uniform-ish integer in [0, n) via floor(u * n); requires n < 2^53."""
        return int(self.next_float() * n)


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash of a UTF-8 string (offset 0xcbf29ce484222325,
    prime 0x100000001b3)."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(master: int, label: str) -> int:
    """Deterministic substream seed: first SplitMix64 output of
    master XOR fnv1a64(label)."""
    _, out = _mix((master & _MASK64) ^ fnv1a64(label))
    return out


def derive_index_seed(master: int, index: int) -> int:
    """Deterministic per-item seed: first SplitMix64 output of
    master XOR (index + 1)."""
    _, out = _mix((master & _MASK64) ^ ((index + 1) & _MASK64))
    return out

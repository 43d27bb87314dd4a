"""Seeded, portable random number generation.

Every stochastic choice in the package (synthetic data, parameter
initialization, batch sampling) draws from the generator defined here,
never from global library state, so a 64-bit seed pins the entire
stream.

Algorithm: splitmix64. The n-th raw output is

    mix64(seed + (n + 1) * 0x9E3779B97F4A7C15)

where ``mix64`` is the standard finalizer with multiplier constants
``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB`` and shifts 30/27/31.
Uniform doubles take the top 53 bits; normal deviates apply the
Box-Muller transform to uniform pairs. All integer arithmetic is
mod 2**64, so repeated runs with one seed are bit-identical on one
platform. (Normals pass through libm's log/cos/sin, which may differ by
an ulp between C libraries; same-machine determinism is exact.)
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD_SALT = np.uint64(0x8E9B5C4A1F0D3B77)

_U53_SCALE = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 output finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class Rng:
    """A counter-based splitmix64 stream.

    The stream position is an explicit counter, so drawing n values in
    one call or in several calls yields the same sequence.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def child(self, tag: int) -> "Rng":
        """Derive an independent stream from (seed, tag), position 0."""
        base = np.uint64((int(self._seed) ^ int(_CHILD_SALT)) & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            mixed = _mix64(base + np.uint64(tag & 0xFFFFFFFFFFFFFFFF) * _GAMMA)
        return Rng(int(mixed))

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix64(self._seed + idx * _GAMMA)

    def uniform(self, shape) -> np.ndarray:
        """Uniform float64 in [0, 1), shaped."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        return u.reshape(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        """Standard normal deviates (Box-Muller), float64, shaped."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log never sees zero.
        u1 = ((self.u64(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * _U53_SCALE
        u2 = (self.u64(pairs) >> np.uint64(11)).astype(np.float64) * _U53_SCALE
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if scale != 1.0:
            z = z * scale
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """A permutation of range(n) from an argsort of raw draws."""
        return np.argsort(self.u64(n), kind="stable").astype(np.int64)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound) by modulo (bias negligible for the
        tiny bounds used here: caption counts, sweep picks)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.u64(n) % np.uint64(bound)).astype(np.int64)


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)

"""Portable pseudo-random stream used for every seeded draw in the package.

The generator is xorshift64* (Vigna, 2016) with state seeded through one
SplitMix64 step, so a zero seed still gives a nonzero state:

    seed:    z = (seed + 0x9E3779B97F4A7C15) mod 2**64
             z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
             state = z ^ (z >> 31)
    step:    state ^= state >> 12
             state ^= state << 25   (mod 2**64)
             state ^= state >> 27
             out = state * 0x2545F4914F6CDD1D  (mod 2**64)

Uniform doubles are ``(out >> 11) * 2**-53`` in [0, 1).  Normal deviates
come from Box-Muller pairs ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``,
cosine branch first.  Shuffles are Fisher-Yates from the top index down
using ``uniform_int``.  Nothing here depends on numpy's bit generators, so
the stream is identical for any implementation that follows these steps.
"""

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x):
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed):
        self.state = splitmix64(int(seed) & MASK64) or 0x9E3779B97F4A7C15
        self._spare = None

    def next_u64(self):
        s = self.state
        s ^= s >> 12
        s ^= (s << 25) & MASK64
        s ^= s >> 27
        self.state = s
        return (s * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self):
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform_int(self, n):
        """Integer in [0, n) by rejection, so there is no modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape):
        n = int(np.prod(shape))
        return np.array([self.normal() for _ in range(n)], dtype=np.float64).reshape(shape)

    def uniforms(self, shape, low=0.0, high=1.0):
        n = int(np.prod(shape))
        u = np.array([self.uniform() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * u).reshape(shape)

    def permutation(self, n):
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.uniform_int(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)


def derive_seed(seed, *tags):
    """Independent sub-seed for a named purpose (e.g. ``derive_seed(s, "init")``)."""
    h = int(seed) & MASK64
    for tag in tags:
        for ch in str(tag).encode():
            h = splitmix64(h ^ ch)
        h = splitmix64(h)
    return h

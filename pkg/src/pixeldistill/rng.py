"""Deterministic PRNG built on splitmix64.

The generator state is a 64-bit seed plus a draw counter; the k-th output is
``mix64(seed + k * GOLDEN)`` where ``mix64`` is the splitmix64 finalizer. The
integer stream is bit-exact on every platform. Because outputs depend only on
(seed, k), blocks of draws can be produced vectorized with numpy uint64
arithmetic without changing the stream.

Derived floating-point draws (uniform, gaussian) are exact deterministic
functions of the integer stream; gaussians use Box-Muller, so their low bits
depend on the platform libm. Everything trained or generated in this package
is reproducible bit-for-bit within one environment.
"""

import math

import numpy as np

from .fnv import fnv1a64_str

GOLDEN = 0x9E3779B97F4A7C15
_MASK = 0xFFFFFFFFFFFFFFFF
_CHILD_SALT = 0x632BE59BD9B4E019

_INV_2_53 = 2.0 ** -53


def mix64(z):
    """splitmix64 output function on a python int."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z):
    """Vectorized splitmix64 output function on a uint64 array."""
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


class Rng:
    """splitmix64 stream with counter-based vectorized block draws."""

    __slots__ = ("seed", "_drawn")

    def __init__(self, seed):
        self.seed = int(seed) & _MASK
        self._drawn = 0

    def __repr__(self):
        return f"Rng(seed=0x{self.seed:016x}, drawn={self._drawn})"

    def next_u64(self):
        self._drawn += 1
        return mix64(self.seed + self._drawn * GOLDEN)

    def u64_block(self, n):
        """Next n outputs of the stream as a uint64 array."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        ks = np.arange(self._drawn + 1, self._drawn + n + 1, dtype=np.uint64)
        self._drawn += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + ks * np.uint64(GOLDEN)
        return _mix64_array(states)

    def uniform(self):
        """One float64 uniform in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_block(self, n):
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform_in(self, lo, hi):
        return lo + (hi - lo) * self.uniform()

    def normal_block(self, n):
        """n standard normals via Box-Muller (draws are consumed in pairs)."""
        m = (n + 1) // 2
        u1 = ((self.u64_block(m) >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = self.uniform_block(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def randint(self, bound):
        """Uniform int in [0, bound). Bias is O(bound / 2^53), negligible here."""
        return int(self.uniform() * bound)

    def randint_block(self, n, bound):
        return (self.uniform_block(n) * bound).astype(np.int64)

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def choose_without_replacement(self, pool, k):
        """k distinct entries of ``pool`` (1-d array), via partial Fisher-Yates."""
        m = len(pool)
        if k > m:
            raise ValueError(f"cannot draw {k} from pool of {m} without replacement")
        work = np.array(pool, copy=True)
        draws = self.u64_block(k)
        for j in range(k):
            r = j + int(draws[j]) % (m - j)
            work[j], work[r] = work[r], work[j]
        return work[:k]

    def child(self, key):
        """Independent stream derived from (seed, key); ignores draws made so far."""
        if isinstance(key, str):
            key = fnv1a64_str(key)
        return Rng(mix64(self.seed ^ mix64((int(key) + _CHILD_SALT) & _MASK)))

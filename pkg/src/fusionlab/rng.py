"""Deterministic counter-based random numbers.

The generator is splitmix64 used in counter mode: output i is a bit mix of
``seed + (position + i) * GAMMA``. The stream depends only on (seed,
position), so draws are reproducible bit-for-bit on every platform and the
whole batch can be produced vectorized with uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix(z):
    """splitmix64 finalizer on a uint64 array."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _fnv1a(text):
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in text.encode("utf-8"):
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


class Rng:
    """Seeded stream of uniforms/normals/integers.

    Same seed means the same sequence; `derive` produces an independent
    stream for a named sub-task without disturbing the parent.
    """

    algorithm = "splitmix64"

    def __init__(self, seed, position=0):
        self.seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self.position = int(position)

    def __repr__(self):
        return f"Rng(seed={int(self.seed)}, position={self.position})"

    def _raw(self, n):
        idx = np.arange(self.position, self.position + n, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            return _mix(self.seed + (idx + np.uint64(1)) * _GAMMA)

    def uniform(self, shape=()):
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()):
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = (self._raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1 = 1.0 - u[:pairs]            # (0, 1]: log stays finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                            r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low, high, shape=()):
        """Integers in [low, high). Modulo bias is negligible at desk scale."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        v = (self._raw(n) % span).astype(np.int64) + low
        return v.reshape(shape) if shape else int(v[0])

    def permutation(self, n):
        """Fisher-Yates shuffle of arange(n)."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n, size, replace=False):
        """Sample `size` indices from range(n)."""
        if replace:
            return self.integers(0, n, (size,))
        if size > n:
            raise ValueError(f"cannot draw {size} from {n} without replacement")
        return self.permutation(n)[:size]

    def derive(self, tag):
        """Independent child stream named by an int or string tag."""
        t = _fnv1a(tag) if isinstance(tag, str) else np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            child = _mix(self.seed ^ _mix(t + _GAMMA))
        return Rng(int(child))

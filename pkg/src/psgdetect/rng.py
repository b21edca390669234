"""Deterministic random streams based on SplitMix64 in counter mode.

Every random draw in this package comes from a `Stream`, so any consumer
(or a reimplementation in another language) can reproduce draws exactly.
The full algorithm, using wrapping 64-bit unsigned arithmetic:

    PHI = 0x9E3779B97F4A7C15
    mix64(z):                        # SplitMix64 finalizer (Steele et al.)
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

    stream state for (root, w1, ..., wk):
        s = mix64(root + PHI)
        for w in (w1, ..., wk): s = mix64(s ^ mix64(w + PHI))

    i-th raw output (i = 1, 2, ...):   z_i = mix64(s + i * PHI)

Derived draws:
  * uniform in [0, 1):     u = (z >> 11) * 2**-53
  * uniform in (0, 1]:     u = ((z >> 11) + 1) * 2**-53
  * standard normal:       Box-Muller on consecutive open-uniform pairs,
                           z0 = sqrt(-2 ln u1) cos(2 pi u2),
                           z1 = sqrt(-2 ln u1) sin(2 pi u2)
  * integer in [0, n):     floor(u * n) from a half-open uniform
  * Poisson(lam):          CDF inversion from one half-open uniform:
                           k = 0, p = exp(-lam), F = p;
                           while u >= F: k += 1; p *= lam / k; F += p
  * shuffle:               Fisher-Yates, for i = n-1 .. 1:
                           j = integer in [0, i+1); swap a[i], a[j]

String words are folded to 64 bits with FNV-1a (offset 0xCBF29CE484222325,
prime 0x100000001B3) over their UTF-8 bytes.
"""

from __future__ import annotations

import math

import numpy as np

_PHI = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U64 = (1 << 64) - 1


def _mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    """Fold a string to 64 bits; used to key streams by name."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _U64
    return h


class Stream:
    """One independent, replayable random stream.

    The stream is keyed by an integer root seed plus any number of integer
    or string words, so substreams like (seed, "record", 17, "channel", 3)
    never collide and never depend on draw order elsewhere.
    """

    def __init__(self, root: int, *words: int | str):
        s = _mix64(np.uint64(root & _U64) + _PHI)
        for w in words:
            wi = fnv1a64(w) if isinstance(w, str) else (int(w) & _U64)
            with np.errstate(over="ignore"):
                s = _mix64(s ^ _mix64(np.uint64(wi) + _PHI))
        self._state = s
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as a uint64 array."""
        i = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._state + i * _PHI)

    def uniform(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_open(self, n: int) -> np.ndarray:
        """n uniforms in (0, 1], safe to pass through log()."""
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller (pairs; odd n drops the last)."""
        m = (n + 1) // 2
        u1 = self.uniform_open(m)
        u2 = self.uniform_open(m)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def poisson(self, lam: float) -> int:
        """One Poisson draw by CDF inversion; exact for lam up to ~700."""
        if lam < 0:
            raise ValueError("lam must be non-negative")
        if lam == 0:
            return 0
        u = float(self.uniform(1)[0])
        k = 0
        p = math.exp(-lam)
        cdf = p
        while u >= cdf:
            k += 1
            p *= lam / k
            cdf += p
        return k

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffled copy."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            out[i], out[j] = out[j], out[i]
        return out

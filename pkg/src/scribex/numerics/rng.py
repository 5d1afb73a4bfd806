"""Counter-based deterministic random number generation.

Draws are pure functions of (seed, counter): the k-th value of a stream
is a 64-bit hash of the seed and k, so identical states replay identical
sequences on any platform, and independent streams can be split off with
``child`` without consuming draws from the parent. This is what makes
training, cropping and deformation sampling reproducible and resumable.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_CHILD_SALT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_INV53 = float(2.0**-53)


def _mix(z):
    """splitmix64 output function (vectorized over uint64 arrays)."""
    z = z ^ (z >> _U64(30))
    z = z * _M1
    z = z ^ (z >> _U64(27))
    z = z * _M2
    return z ^ (z >> _U64(31))


class RngState:
    """A (seed, counter) pair identifying a position in a random stream."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed, counter=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def clone(self):
        return RngState(self.seed, self.counter)

    def __repr__(self):
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def _raw(self, n):
        ks = _U64(self.seed) + _GOLDEN * (np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64))
        self.counter += n
        return _mix(ks)

    def uniform(self, low=0.0, high=1.0, size=None):
        """i.i.d. uniform draws on [low, high)."""
        n = int(np.prod(size)) if size is not None else 1
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * _INV53
        vals = low + (high - low) * u
        if size is None:
            return float(vals[0])
        return vals.reshape(size)

    def normal(self, size=None):
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(size)) if size is not None else 1
        raw = self._raw(2 * n)
        u1 = ((raw[:n] >> _U64(11)).astype(np.float64) + 1.0) * _INV53  # (0, 1]
        u2 = (raw[n:] >> _U64(11)).astype(np.float64) * _INV53
        vals = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if size is None:
            return float(vals[0])
        return vals.reshape(size)

    def integers(self, low, high, size=None):
        """Uniform integers on [low, high)."""
        if high <= low:
            raise ValueError(f"integers requires high > low, got [{low}, {high})")
        u = self.uniform(0.0, 1.0, size=(1,) if size is None else size)
        vals = np.minimum(np.floor(low + u * (high - low)).astype(np.int64), high - 1)
        if size is None:
            return int(vals[0])
        return vals

    def permutation(self, n):
        keys = self.uniform(size=(n,))
        return np.argsort(keys, kind="stable")

    def child(self, *tags):
        """Derive an independent stream from integer tags; parent unchanged."""
        s = _mix(_U64(self.seed) ^ _CHILD_SALT)
        for t in tags:
            s = _mix(s + _GOLDEN * _U64(int(t) & 0xFFFFFFFFFFFFFFFF))
        return RngState(int(s))

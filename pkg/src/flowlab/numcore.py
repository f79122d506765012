"""Dense numeric helpers: seeded random streams and row-wise matrix norms.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Matrices are row-major with one row per hidden unit, which is the layout the
drift norms below are defined over.
"""
import math

import numpy as np

__all__ = [
    "Rng",
    "as_vec",
    "norm_pq",
    "sample_half_normal",
    "sample_normal",
    "sample_uniform",
]


def as_vec(x):
    """Return ``x`` as a finite 1-D float64 array."""
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entry in vector")
    return v


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    Two instances built from the same seed produce bit-identical streams.
    Child streams for parallel tasks come from :meth:`spawn`, which derives a
    new seed from ``(seed, key)`` and never consumes the parent stream.
    """

    def __init__(self, seed=0, _key=()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *key):
        return Rng(self.seed, self._key + tuple(key))

    def normal(self, mu=0.0, sigma=1.0, size=None):
        return sample_normal(self, mu, sigma, size)

    def half_normal(self, sigma=1.0, size=None):
        return sample_half_normal(self, sigma, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return sample_uniform(self, low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"


def _shape(n):
    if n is None:
        return None
    return (int(n),) if np.isscalar(n) else tuple(int(k) for k in n)


def sample_normal(rng, mu, sigma, n):
    """Draw i.i.d. N(mu, sigma^2) values.

    Uses numpy's ziggurat sampler on the PCG64 stream. ``sigma == 0`` returns
    the constant ``mu`` without touching the stream.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    shape = _shape(n)
    if sigma == 0:
        return np.full(shape if shape is not None else (), float(mu))
    return rng.generator.normal(mu, sigma, size=shape)


def sample_half_normal(rng, sigma, n):
    """Draw i.i.d. |N(0, sigma^2)| values; mean is sigma * sqrt(2/pi)."""
    return np.abs(sample_normal(rng, 0.0, sigma, n))


def sample_uniform(rng, low, high, n):
    return rng.generator.uniform(low, high, size=_shape(n))


def _vec_norm(rows, p):
    if p == math.inf:
        return np.max(np.abs(rows), axis=1)
    if p == 1:
        return np.sum(np.abs(rows), axis=1)
    if p == 2:
        return np.sqrt(np.sum(rows * rows, axis=1))
    return np.sum(np.abs(rows) ** p, axis=1) ** (1.0 / p)


def norm_pq(m, p, q):
    """Row-wise mixed norm ``(sum_i ||m_i||_p^q)^(1/q)``.

    ``q = inf`` gives the largest row norm. A 1-D input is treated as a
    single row.

    >>> norm_pq(np.eye(2), 2, 1)
    2.0
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.size == 0:
        raise ValueError("empty matrix")
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    # scale by the largest entry so powers neither underflow nor overflow
    s = float(np.max(np.abs(m)))
    if s == 0.0 or not math.isfinite(s):
        s = 1.0
    rn = _vec_norm(m / s, p)
    if q == math.inf:
        return s * float(np.max(rn))
    if q == 1:
        return s * float(np.sum(rn))
    if q == 2:
        return s * float(np.sqrt(np.sum(rn * rn)))
    return s * float(np.sum(rn ** q) ** (1.0 / q))

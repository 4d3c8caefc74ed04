"""Dense float64 kernels and a seeded, splittable random stream.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; the helpers
here add the shape checks and numerical guards the rest of the package
relies on.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def dot(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    return float(u @ v)


def norm2(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    return float(np.sqrt(v @ v))


def softmax_rows(z) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    z = as_matrix(z)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(z) -> np.ndarray:
    z = as_matrix(z)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    # subgradient at 0 is taken as 0
    return (np.asarray(x) > 0).astype(np.float64)


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator keyed through
    ``numpy.random.SeedSequence``; child streams extend the spawn key, so
    distinct ids give independent sequences and the same id always gives
    the same one.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: tuple[int, ...] = ()):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = tuple(_path) + (self.stream_id,)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id, _path=self._path)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self._path})"

    # thin pass-throughs so callers need not reach for .generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

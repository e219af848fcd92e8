"""Numeric substrate: validated float64 arrays, seeded randomness, finite differences.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
The helpers here only validate shape and finiteness at API boundaries.

Random numbers come from a counter-based SplitMix64 generator so that a seed
pins down every draw on every platform. Draw ``i`` (0-based, counted from the
generator's creation) is::

    z  = seed + (i + 1) * 0x9E3779B97F4A7C15            (mod 2**64)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9           (mod 2**64)
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB           (mod 2**64)
    z  =  z ^ (z >> 31)

Uniforms in [0, 1) are ``(z >> 11) * 2**-53``. Normals use Box-Muller on two
consecutive uniforms ``u1, u2``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
(the sine branch is discarded).
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "Rng",
    "as_vector",
    "as_matrix",
    "matvec",
    "sigmoid",
    "finite_diff_grad",
]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m, "m")
    v = as_vector(v, "v")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: matrix {m.shape} incompatible with vector ({v.shape[0]},)")
    return m @ v


def sigmoid(v) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |v|."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0, e) / (1.0 + e)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value when perturbing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream. Single owner; not thread-safe."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        return _splitmix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = int(np.prod(size)) if size is not None else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        n = int(np.prod(size)) if size is not None else 1
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, key: int | str) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        if isinstance(key, str):
            key = int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")
        mixed = _splitmix(np.array([(self.seed ^ (int(key) * 0xD1B54A32D192ED03)) & _MASK64], dtype=np.uint64))
        return Rng(int(mixed[0]))

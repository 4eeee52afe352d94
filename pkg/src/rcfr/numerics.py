"""Dense float64 helpers and seeded random streams shared by the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; the helpers
here only add shape checking and a couple of numerically careful kernels.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array dimensions do not agree."""


def as_matrix(a, name: str = "array") -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for cell ``index`` of a sweep seeded by ``master_seed``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.default_rng(ss)


def derive_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int, mean, scale: float) -> np.ndarray:
    """``rows`` i.i.d. draws from N(mean, scale^2 I_cols)."""
    mean = np.asarray(mean, dtype=DTYPE).reshape(-1)
    if mean.shape[0] != cols:
        raise ShapeError(f"mean has length {mean.shape[0]}, expected {cols}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return mean[None, :] + scale * rng.standard_normal((rows, cols))


def pairwise_sq_dists(a, b) -> np.ndarray:
    """Squared Euclidean distances between the rows of ``a`` and ``b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column mismatch: {a.shape} vs {b.shape}")
    d = a @ b.T
    d *= -2.0
    d += np.einsum("ij,ij->i", a, a)[:, None]
    d += np.einsum("ij,ij->i", b, b)[None, :]
    np.maximum(d, 0.0, out=d)
    if a is b or (a.shape == b.shape and np.array_equal(a, b)):
        d += d.T
        d *= 0.5
        np.fill_diagonal(d, 0.0)
    return d

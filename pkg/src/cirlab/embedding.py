"""Vector primitives: normalization, cosine similarity/distance, similarity matrices."""
from __future__ import annotations

import numpy as np

from cirlab.errors import DimMismatch, ZeroVector

ZERO_NORM = 1e-12


def as_vector(v) -> np.ndarray:
    """Coerce to a finite 1-d float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains NaN or Inf")
    return arr


def l2_normalize(v) -> np.ndarray:
    arr = as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return arr / norm


def normalize_rows(m) -> np.ndarray:
    """Row-wise L2 normalization of a 2-d array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if arr.shape[0] and np.any(norms < ZERO_NORM):
        raise ZeroVector("cannot normalize a zero row")
    return arr / norms


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimMismatch(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def cosine_similarity(a, b) -> float:
    a, b = as_vector(a), as_vector(b)
    _check_dims(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    # clamp so threshold logic never sees 1.0000000002
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def similarity_matrix(A, B) -> np.ndarray:
    """Cosine similarity between every row of ``A`` and every row of ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    _check_dims(A, B)
    return np.clip(normalize_rows(A) @ normalize_rows(B).T, -1.0, 1.0)


def cosine_distance_matrix(A, B=None) -> np.ndarray:
    return 1.0 - similarity_matrix(A, A if B is None else B)

"""Dense float64 matrix helpers and seeded initialization.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Randomness comes from ``numpy.random.Generator`` backed by
PCG64, seeded explicitly; the same seed always yields the same stream.
"""

from __future__ import annotations

import math

import numpy as np

Matrix = np.ndarray
Rng = np.random.Generator


class ShapeError(ValueError):
    pass


def make_rng(*seed: int) -> Rng:
    """PCG64 generator; several integers may be given to derive independent streams."""
    return np.random.Generator(np.random.PCG64(list(seed) if len(seed) > 1 else seed[0]))


def as_matrix(x, name: str = "matrix") -> Matrix:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    _check_dims(rows, cols)
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b)
    return a + b


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same_shape(a, b)
    return a - b


def scale(a: Matrix, s: float) -> Matrix:
    return a * s


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def frobenius_norm(a: Matrix) -> float:
    return math.sqrt(float(np.sum(a * a)))


def kaiming_uniform(rows: int, cols: int, rng: Rng) -> Matrix:
    """Uniform on [-sqrt(6/cols), sqrt(6/cols)]; fan_in is the number of columns."""
    _check_dims(rows, cols)
    bound = math.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def flat_cosine(a: Matrix, b: Matrix) -> float:
    """Cosine similarity of the two matrices flattened to vectors."""
    _same_shape(a, b)
    va = np.ravel(a)
    vb = np.ravel(b)
    aa = float(va @ va)
    bb = float(vb @ vb)
    if aa == 0.0 or bb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero matrix")
    cos = float(va @ vb) / math.sqrt(aa * bb)
    return min(1.0, max(-1.0, cos))


def _same_shape(a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid dimensions {rows}x{cols}")

"""Dense float64 helpers and seeded random streams shared by the whole package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Random streams are
``numpy.random.Generator`` instances backed by PCG64 and seeded through
``numpy.random.SeedSequence``; the normal sampler is numpy's ziggurat transform.
Independent sub-streams are derived with :func:`sub_rng`, never by sharing a
generator between tasks.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    m = np.array(data, dtype=np.float64, ndmin=2)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {rows}x{cols}, got {m.shape[0]}x{m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite values")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed accumulation order.

    Accumulates ``out += a[:, k] * b[k, :]`` for k = 0, 1, ... in sequence, so every
    output element is the left-to-right sum of its products; the result is
    bit-identical to a naive triple loop and independent of the BLAS build.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def frobenius_norm_sq(m: Matrix) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def sub_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``seed`` addressed by the integer path ``keys``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int) -> Matrix:
    if rows < 1 or cols < 1:
        raise ShapeError("rows and cols must be >= 1")
    return rng.standard_normal((rows, cols))


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)

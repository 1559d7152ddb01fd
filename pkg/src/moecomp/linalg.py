"""Dense linear algebra kernel.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64.  Everything here
is a pure function; inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

__all__ = [
    "SvdFactors",
    "as_matrix",
    "matmul",
    "frobenius_norm",
    "svd",
    "truncated_factors",
    "silu",
    "silu_derivative",
    "sigmoid",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (copying only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name}: empty matrix of shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = U @ diag(S) @ Vt`` with ``r = min(rows, cols)``."""

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray

    @property
    def rank_capacity(self) -> int:
        return int(self.S.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.Vt


def svd(a, name: str = "matrix") -> SvdFactors:
    """Thin SVD with a fixed sign convention.

    Each column of ``U`` is flipped (together with the matching row of ``Vt``)
    so that its largest-magnitude entry is nonnegative; ties go to the first
    such entry.  This makes factors reproducible across runs and platforms.
    """
    a = as_matrix(a, name)
    try:
        U, S, Vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"svd did not converge for {name}: {exc}") from exc
    U = U.copy()
    Vt = Vt.copy()
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U *= signs
    Vt *= signs[:, None]
    S = np.maximum(S, 0.0)
    return SvdFactors(U=U, S=S, Vt=Vt)


def truncated_factors(f: SvdFactors, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(U_K, diag(S_K) @ Vt_K)``, the best rank-``K`` factor pair."""
    r = f.rank_capacity
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= r:
        raise ArgumentError(f"truncation rank K={K} outside [1, {r}]")
    K = int(K)
    return f.U[:, :K].copy(), f.S[:K, None] * f.Vt[:K]


def sigmoid(x):
    # two-branch form avoids overflow in exp for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def silu(x):
    """``x * sigmoid(x)``; accepts scalars or arrays."""
    return np.asarray(x, dtype=np.float64) * sigmoid(x) if np.ndim(x) else float(x) * sigmoid(x)


def silu_derivative(x):
    s = sigmoid(x)
    x = np.asarray(x, dtype=np.float64) if np.ndim(x) else float(x)
    return s * (1.0 + x * (1.0 - s))

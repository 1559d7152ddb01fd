"""Sparse isometric projection for residual reconstruction.

Row ``t`` of the ``D x a`` matrix ``P`` has a single nonzero, ``1/sqrt(n_q)`` in
column ``q = pi[t]``, where ``n_q`` counts the rows mapped to ``q``.  Distinct
columns have disjoint supports, so ``P^T P = I_a`` holds exactly and ``P`` is
an isometry from R^a into R^D.  (With pure uniform sampling the map is also
close to uniform over the D coordinates, which is what makes a small ``a``
recover a useful share of the residual energy; that probabilistic bound is
not checked at runtime.)

``P`` is never materialized: apply is an index gather, the adjoint a
scatter-add (``numpy.bincount``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, FormatError, ShapeError

__all__ = [
    "SparseProjection",
    "build_projection",
    "apply_projection",
    "adjoint_projection",
    "gram_check",
    "encode_projection",
    "decode_projection",
    "MAGIC",
    "VERSION",
]

MAGIC = b"RFIDPROJ"
VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")


@dataclass(frozen=True, eq=False)
class SparseProjection:
    D: int
    a: int
    pi: np.ndarray
    counts: np.ndarray
    seed: int

    @property
    def scale(self) -> np.ndarray:
        """Per-column value ``1/sqrt(n_q)``."""
        return 1.0 / np.sqrt(self.counts.astype(np.float64))

    @classmethod
    def from_index_map(cls, pi, a: int, seed: int = 0) -> "SparseProjection":
        """Wrap an explicit index map (every column must be hit at least once)."""
        pi = np.asarray(pi, dtype=np.int64).copy()
        if pi.ndim != 1 or np.any(pi < 0) or np.any(pi >= a):
            raise ArgumentError(f"index map entries must lie in 0..{a - 1}")
        counts = np.bincount(pi, minlength=a).astype(np.int64)
        if np.any(counts == 0):
            raise ArgumentError("index map leaves a column uncovered")
        pi.setflags(write=False)
        counts.setflags(write=False)
        return cls(D=int(pi.shape[0]), a=int(a), pi=pi, counts=counts, seed=int(seed))

    @property
    def index_bytes(self) -> int:
        """Size of the integer metadata if ``pi`` were stored verbatim as u32."""
        return 4 * self.D


def _sample_pi(D: int, a: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pi = np.empty(D, dtype=np.int64)
    # first a rows cover every column once, so no n_q is ever zero
    pi[:a] = np.arange(a)
    pi[a:] = rng.integers(0, a, size=D - a)
    return pi


def build_projection(D: int, a: int, seed: int) -> SparseProjection:
    if D < 1 or a < 1:
        raise ArgumentError(f"projection dims must be positive, got D={D}, a={a}")
    if a > D:
        raise ArgumentError(f"residual dimension a={a} exceeds D={D}")
    if seed < 0:
        raise ArgumentError("projection seed must be nonnegative")
    pi = _sample_pi(D, a, seed)
    counts = np.bincount(pi, minlength=a).astype(np.int64)
    pi.setflags(write=False)
    counts.setflags(write=False)
    return SparseProjection(D=int(D), a=int(a), pi=pi, counts=counts, seed=int(seed))


def apply_projection(P: SparseProjection, eta) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != (P.a,):
        raise ShapeError(f"eta has shape {eta.shape}, projection expects ({P.a},)")
    return (eta * P.scale)[P.pi]


def adjoint_projection(P: SparseProjection, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (P.D,):
        raise ShapeError(f"vector has shape {v.shape}, projection expects ({P.D},)")
    return np.bincount(P.pi, weights=v, minlength=P.a) * P.scale


def gram_check(P: SparseProjection) -> float:
    """Max |(P^T P - I)_{qq'}| computed from the index map alone.

    Off-diagonal entries vanish structurally (disjoint supports); diagonal
    entry ``q`` is ``actual_count_q / stored_count_q``.
    """
    actual = np.bincount(P.pi, minlength=P.a).astype(np.float64)
    stored = np.asarray(P.counts, dtype=np.float64)
    if stored.shape != actual.shape:
        return float("inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        diag = np.where(stored > 0, actual / stored, np.inf)
    return float(np.max(np.abs(diag - 1.0)))


def encode_projection(P: SparseProjection) -> bytes:
    """Little-endian: magic, u32 version, u64 seed, u64 D, u64 a, a x u32 counts."""
    header = _HEADER.pack(MAGIC, VERSION, P.seed, P.D, P.a)
    return header + np.asarray(P.counts, dtype="<u4").tobytes()


def decode_projection(data: bytes) -> SparseProjection:
    if len(data) < _HEADER.size:
        raise FormatError(f"projection blob truncated at offset {len(data)}: "
                          f"header needs {_HEADER.size} bytes")
    magic, version, seed, D, a = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported projection version {version} at offset 8")
    if a < 1 or a > D:
        raise FormatError(f"invalid dimensions D={D}, a={a} at offset 28")
    expected = _HEADER.size + 4 * a
    if len(data) != expected:
        raise FormatError(f"projection blob has {len(data)} bytes, expected {expected} "
                          f"(counts start at offset {_HEADER.size})")
    counts = np.frombuffer(data, dtype="<u4", offset=_HEADER.size, count=a).astype(np.int64)
    P = build_projection(D, a, seed)
    if not np.array_equal(counts, P.counts):
        bad = int(np.flatnonzero(counts != P.counts)[0])
        raise FormatError(f"stored counts disagree with seed-regenerated index map "
                          f"at offset {_HEADER.size + 4 * bad}")
    return P

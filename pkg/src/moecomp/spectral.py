"""Effective-rank scoring, importance fusion and rank allocation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError, DegenerateError, InfeasibleRatioError

__all__ = [
    "ImportanceScores",
    "RankAllocation",
    "effective_rank",
    "normalized_effective_ranks",
    "fuse_importance",
    "importance_scores",
    "rank_budget",
    "allocate_ranks",
    "DEFAULT_XI",
    "DEFAULT_RESIDUAL_FRACTION",
]

DEFAULT_XI = 0.7
DEFAULT_RESIDUAL_FRACTION = 0.03

# probability mass below this is an exact zero in the entropy sum
_P_FLOOR = 1e-15
# guards floor() against x.9999999 representation error of integer-valued products
_FLOOR_SLACK = 1e-9


def _floor(x):
    return np.floor(np.asarray(x, dtype=np.float64) + _FLOOR_SLACK).astype(np.int64)


def effective_rank(singular_values: Sequence[float]) -> float:
    """exp of the Shannon entropy of the normalized squared spectrum.

    Natural log is used; the base cancels between log and exp.
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ArgumentError("singular values must be a nonempty vector")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ArgumentError("singular values must be finite and nonnegative")
    energy = s * s
    total = energy.sum()
    if total <= 0:
        raise DegenerateError("all-zero spectrum has no effective rank")
    p = energy / total
    p = p[p >= _P_FLOOR]
    H = float(-np.sum(p * np.log(p)))
    return math.exp(H)


def normalized_effective_ranks(eff_ranks: Sequence[float]) -> np.ndarray:
    r = np.asarray(eff_ranks, dtype=np.float64)
    if np.any(r <= 0):
        raise ArgumentError("effective ranks must be positive")
    return r / r.sum()


def fuse_importance(E: Sequence[float], F: Sequence[float], xi: float) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if E.shape != F.shape:
        raise ArgumentError(f"length mismatch: E{E.shape} vs F{F.shape}")
    if not 0.0 <= xi <= 1.0:
        raise ArgumentError(f"fusion weight xi={xi} outside [0, 1]")
    return xi * E + (1.0 - xi) * F


@dataclass(frozen=True)
class ImportanceScores:
    eff_ranks: np.ndarray
    E: np.ndarray
    F: np.ndarray
    C: np.ndarray
    xi: float

    def to_dict(self) -> dict:
        return {"xi": self.xi, "eff_ranks": self.eff_ranks.tolist(), "E": self.E.tolist(),
                "F": self.F.tolist(), "C": self.C.tolist()}


def importance_scores(eff_ranks, F, xi: float = DEFAULT_XI) -> ImportanceScores:
    eff = np.asarray(eff_ranks, dtype=np.float64)
    E = normalized_effective_ranks(eff)
    F = np.asarray(F, dtype=np.float64)
    return ImportanceScores(eff_ranks=eff, E=E, F=F, C=fuse_importance(E, F, xi), xi=xi)


def rank_budget(n: int, k: int, p: int, d: int, ratio: float,
                residual_fraction: float = DEFAULT_RESIDUAL_FRACTION) -> tuple[int, int]:
    """Global rank budget for one matrix kind (up or gate) of one layer.

    Returns ``(K_total, a_per_group)``.  Float parameters of the compressed
    form are ``sum_g K_g*(k*p + d)`` for the A-blocks and B-rows, ``n*m`` mixing
    coefficients and ``m*a`` residual entries; these must fit in
    ``floor((1 - ratio) * n*p*d)``.
    """
    if k < 1 or n % k != 0:
        raise ConfigurationError(f"group size k={k} does not divide n={n}")
    if not 0.0 < ratio < 1.0:
        raise ArgumentError(f"compression ratio {ratio} outside (0, 1)")
    if not 0.0 <= residual_fraction < 1.0:
        raise ArgumentError(f"residual fraction {residual_fraction} outside [0, 1)")
    m = n // k
    original = n * p * d
    target = int(_floor((1.0 - ratio) * original))
    a = int(_floor(residual_fraction * k * p * d))
    per_rank = k * p + d
    K_total = (target - m * a - n * m) // per_rank
    if K_total < m:
        raise InfeasibleRatioError(
            f"ratio={ratio}: budget of {target} params leaves K_total={K_total} "
            f"< m={m} groups (each group needs rank >= 1)")
    return int(K_total), a


@dataclass(frozen=True)
class RankAllocation:
    K_total: int
    K: tuple[int, ...]
    raw: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"K_total": self.K_total, "K": list(self.K), "raw": list(self.raw)}


def allocate_ranks(C: Sequence[float], K_total: int, r_max: Sequence[int]) -> RankAllocation:
    """Proportional rank allocation with a floor of 1 per group.

    ``raw`` holds the proportional floors before clamping and repair.  When the
    floor of 1 pushes the sum over budget, the largest group (lowest index on
    ties) is decremented until the budget holds.
    """
    C = np.asarray(C, dtype=np.float64)
    r_max = np.asarray(r_max, dtype=np.int64)
    m = C.shape[0]
    if r_max.shape != (m,):
        raise ArgumentError("r_max must have one entry per group")
    if K_total < m:
        raise InfeasibleRatioError(f"K_total={K_total} < m={m}: cannot give every group rank 1")
    raw = _floor(K_total * C / C.sum())
    K = np.minimum(np.maximum(1, raw), r_max)
    while K.sum() > K_total:
        top = int(np.argmax(K))  # argmax returns the first maximum
        if K[top] <= 1:
            break
        K[top] -= 1
    return RankAllocation(K_total=int(K_total), K=tuple(int(x) for x in K),
                          raw=tuple(int(x) for x in raw))

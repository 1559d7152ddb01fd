import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from moecomp.errors import ArgumentError, DegenerateError, InfeasibleRatioError
from moecomp.spectral import (DEFAULT_XI, allocate_ranks, effective_rank, fuse_importance,
                              importance_scores, normalized_effective_ranks, rank_budget)

# exp(-(0.8 ln 0.8 + 0.2 ln 0.2)) at 40 digits (mpmath)
ERANK_2_1 = 1.649384888466117824217502464037050166292


def test_effective_rank_examples():
    assert effective_rank([1, 1, 1, 1]) == pytest.approx(4.0, abs=1e-12)
    assert effective_rank([5.0, 0, 0, 0]) == 1.0
    assert effective_rank([2.0, 1.0]) == pytest.approx(ERANK_2_1, abs=1e-14)


def test_effective_rank_degenerate():
    with pytest.raises(DegenerateError):
        effective_rank([0.0, 0.0])
    with pytest.raises(ArgumentError):
        effective_rank([1.0, -1.0])


def test_tiny_probabilities_are_dropped():
    assert effective_rank([1.0, 1e-9]) == 1.0


def test_normalized_effective_ranks():
    np.testing.assert_array_equal(normalized_effective_ranks([4, 4]), [0.5, 0.5])
    np.testing.assert_array_equal(normalized_effective_ranks([3, 1]), [0.75, 0.25])
    r = np.random.default_rng(0).uniform(1, 50, size=12)
    E = normalized_effective_ranks(r)
    np.testing.assert_allclose(E, [x / sum(r) for x in r], rtol=1e-15)
    assert abs(E.sum() - 1) < 1e-12


def test_fuse_importance():
    E, F = np.array([0.6, 0.4]), np.array([0.2, 0.8])
    np.testing.assert_array_equal(fuse_importance(E, F, 1.0), E)
    np.testing.assert_array_equal(fuse_importance(E, F, 0.0), F)
    np.testing.assert_allclose(fuse_importance(E, F, 0.5), [0.4, 0.6], atol=1e-15)
    with pytest.raises(ArgumentError):
        fuse_importance(E, F, 1.5)
    assert DEFAULT_XI == 0.7


def test_importance_scores_bundle():
    s = importance_scores([4.0, 4.0], [0.9, 0.1], xi=0.5)
    np.testing.assert_allclose(s.C, [0.7, 0.3])


def test_rank_budget_example():
    assert rank_budget(8, 4, 8, 16, 0.5, 0.03) == (9, 15)


def test_rank_budget_monotone_and_bounded():
    assert rank_budget(8, 4, 8, 16, 0.25, 0.03)[0] > rank_budget(8, 4, 8, 16, 0.5, 0.03)[0]
    K, a = rank_budget(8, 4, 8, 16, 1e-9, 0.0)
    assert a == 0 and K * (4 * 8 + 16) <= 8 * 8 * 16


def test_rank_budget_infeasible():
    with pytest.raises(InfeasibleRatioError):
        rank_budget(32, 4, 16, 32, 0.99)


def test_allocate_ranks_examples():
    assert allocate_ranks([0.4, 0.3, 0.2, 0.1], 10, [100] * 4).K == (4, 3, 2, 1)
    alloc = allocate_ranks([0.98, 0.01, 0.005, 0.005], 8, [100] * 4)
    assert alloc.raw == (7, 0, 0, 0)
    assert alloc.K == (5, 1, 1, 1)
    assert allocate_ranks([0.125] * 8, 32, [100] * 8).K == (4,) * 8


def test_allocate_ranks_repair_ties_go_to_lowest_index():
    # raw floors [2,2,0,0] -> [2,2,1,1] sums to 6 > 4 -> decrement group 0 then group 1
    assert allocate_ranks([0.5, 0.5, 0.0, 0.0], 4, [9] * 4).K == (1, 1, 1, 1)
    assert allocate_ranks([0.5, 0.5, 0.0, 0.0], 5, [9] * 4).K == (1, 2, 1, 1)


def test_allocate_ranks_clamps_to_rmax():
    assert allocate_ranks([0.9, 0.1], 40, [8, 8]).K == (8, 4)


def test_allocate_ranks_infeasible():
    with pytest.raises(InfeasibleRatioError):
        allocate_ranks([0.5, 0.5], 1, [4, 4])


spectra = st.lists(st.floats(0.0, 1e3, allow_nan=False), min_size=1, max_size=40)


@settings(max_examples=200, deadline=None)
@given(spectra, st.floats(1e-3, 1e3))
def test_effective_rank_properties(s, c):
    s = np.array(s)
    assume(np.sum(s * s) > 0 and np.all((s == 0) | (s > 1e-100)))
    r = effective_rank(s)
    nz = int(np.count_nonzero(s))
    assert 1 - 1e-12 <= r <= nz + 1e-9
    assert effective_rank(c * s) == pytest.approx(r, rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64), st.floats(1e-6, 1e6))
def test_effective_rank_equal_spectrum(r, v):
    assert abs(effective_rank([v] * r) - r) < 1e-9


def _simplex(draw_ints):
    w = np.array(draw_ints, dtype=float) + 1e-3
    return w / w.sum()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16).flatmap(lambda m: st.tuples(
    st.lists(st.integers(0, 1000), min_size=m, max_size=m),
    st.lists(st.integers(0, 1000), min_size=m, max_size=m))),
    st.floats(0, 1), st.integers(0, 400))
def test_fusion_and_allocation_invariants(ef, xi, extra):
    E, F = _simplex(ef[0]), _simplex(ef[1])
    C = fuse_importance(E, F, xi)
    assert np.all((C >= 0) & (C <= 1))
    assert abs(C.sum() - 1) < 1e-12
    m = len(C)
    K_total = m + extra
    r_max = [1 + (g * 7) % 13 for g in range(m)]
    alloc = allocate_ranks(C, K_total, r_max)
    K = np.array(alloc.K)
    assert np.all(K >= 1)
    assert K.sum() <= K_total
    assert np.all(K <= r_max)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 100), min_size=2, max_size=10), st.integers(0, 9),
       st.floats(0.0, 2.0), st.integers(10, 500))
def test_raw_allocation_is_monotone(w, g, boost, K_total):
    g = g % len(w)
    C0 = np.array(w, float) / sum(w)
    w2 = np.array(w, float)
    w2[g] *= 1 + boost
    C1 = w2 / w2.sum()
    assume(C1[g] >= C0[g])
    r_max = [10**6] * len(w)
    K_total = max(K_total, len(w))
    assert allocate_ranks(C1, K_total, r_max).raw[g] >= allocate_ranks(C0, K_total, r_max).raw[g]


def test_allocation_floor_tolerates_binary_rounding():
    # 50 * 0.58 evaluates to 28.999999999999996 in binary floating point
    assert allocate_ranks([0.58, 0.42], 50, [100, 100]).raw == (29, 21)

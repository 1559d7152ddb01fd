import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moecomp.errors import ConfigurationError, DegenerateError, FormatError, ShapeError
from moecomp.routing import (GroupPlan, RoutingTrace, aggregate_traces, build_group_plan,
                             expert_frequencies, group_frequencies, load_trace_file,
                             save_trace_file)


def test_expert_frequencies_examples():
    np.testing.assert_array_equal(expert_frequencies(RoutingTrace(0, (3, 1, 0))), [0.75, 0.25, 0.0])
    np.testing.assert_array_equal(expert_frequencies(RoutingTrace(0, (1, 1, 1, 1))), [0.25] * 4)


def test_expert_frequencies_seeded_skewed():
    rng = np.random.default_rng(4)
    z = (rng.pareto(1.2, size=64) * 100).astype(int)
    F = expert_frequencies(RoutingTrace(2, tuple(z)))
    total = sum(int(c) for c in z)
    for f, c in zip(F, z):
        assert f == pytest.approx(int(c) / total, rel=1e-15, abs=0)
    assert abs(F.sum() - 1.0) < 1e-12


def test_degenerate_trace():
    with pytest.raises(DegenerateError):
        expert_frequencies(RoutingTrace(0, (0, 0, 0)))


def test_negative_counts_rejected():
    with pytest.raises(ShapeError):
        RoutingTrace(0, (1, -1))


def test_zero_count_alongside_large_count_is_valid():
    F = expert_frequencies(RoutingTrace(38, (20388, 0, 5)))
    assert F[1] == 0.0


def test_build_group_plan_examples():
    plan = build_group_plan([0.1, 0.4, 0.3, 0.2], 2)
    assert plan.groups == ((1, 2), (3, 0))
    assert plan.m == 2 and plan.k == 2
    assert build_group_plan([0.25] * 4, 2).groups == ((0, 1), (2, 3))


def test_build_group_plan_requires_divisible_k():
    with pytest.raises(ConfigurationError):
        build_group_plan([0.2] * 5, 2)


def test_group_plan_seeded_sort_oracle():
    F = np.random.default_rng(9).dirichlet(np.full(128, 0.3))
    plan = build_group_plan(F, 4)
    assert plan.m == 32
    for g in range(plan.m - 1):
        assert min(F[list(plan.groups[g])]) >= max(F[list(plan.groups[g + 1])])
    ranked = sorted(range(128), key=lambda i: (-F[i], i))
    assert list(plan.ordering) == ranked


def test_group_frequencies_examples():
    trace = RoutingTrace(0, (5, 3, 1, 1))
    plan = GroupPlan(ordering=(0, 1, 2, 3), groups=((0, 1), (2, 3)), k=2)
    np.testing.assert_allclose(group_frequencies(trace, plan), [0.8, 0.2], rtol=0, atol=1e-15)
    trace = RoutingTrace(0, (0, 7, 0, 2))
    plan = build_group_plan(expert_frequencies(trace), 2)
    np.testing.assert_array_equal(group_frequencies(trace, plan), [1.0, 0.0])


def test_group_frequencies_out_of_range():
    plan = GroupPlan(ordering=(0, 1, 2, 3), groups=((0, 1), (2, 7)), k=2)
    with pytest.raises(ShapeError):
        group_frequencies(RoutingTrace(0, (1, 1, 1, 1)), plan)


def test_group_frequencies_seeded_sum_oracle():
    z = np.random.default_rng(1).integers(0, 500, size=16)
    trace = RoutingTrace(0, tuple(z))
    plan = build_group_plan(expert_frequencies(trace), 4)
    total = int(z.sum())
    expected = [sum(int(z[e]) for e in g) / total for g in plan.groups]
    np.testing.assert_allclose(group_frequencies(trace, plan), expected, rtol=1e-15)


counts = st.integers(1, 8).flatmap(
    lambda m: st.lists(st.integers(0, 10_000), min_size=4 * m, max_size=4 * m)
).filter(lambda z: sum(z) > 0)


@settings(max_examples=100, deadline=None)
@given(counts, st.integers(1, 50))
def test_frequency_properties(z, c):
    trace = RoutingTrace(0, tuple(z))
    F = expert_frequencies(trace)
    assert abs(F.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(expert_frequencies(RoutingTrace(0, tuple(c * x for x in z))), F,
                               rtol=1e-15, atol=0)
    plan = build_group_plan(F, 4)
    assert sorted(e for g in plan.groups for e in g) == list(range(len(z)))
    assert [e for g in plan.groups for e in g] == list(plan.ordering)
    Fg = group_frequencies(trace, plan)
    for g, members in enumerate(plan.groups):
        assert abs(Fg[g] - sum(F[e] for e in members)) < 1e-12


def test_aggregate_traces_sums_batches():
    t = aggregate_traces([RoutingTrace(1, (1, 2)), RoutingTrace(1, (3, 0))])
    assert t.counts == (4, 2) and t.layer == 1
    with pytest.raises(ShapeError):
        aggregate_traces([RoutingTrace(1, (1, 2)), RoutingTrace(2, (3, 0))])


def test_trace_file_round_trip(tmp_path):
    traces = [RoutingTrace(0, (3, 1, 0, 2)), RoutingTrace(1, (0, 0, 5, 1))]
    path = tmp_path / "trace.json"
    save_trace_file(path, traces)
    doc = json.loads(path.read_text())
    assert doc == {"n_experts": 4, "layers": [{"layer": 0, "counts": [3, 1, 0, 2]},
                                              {"layer": 1, "counts": [0, 0, 5, 1]}]}
    assert load_trace_file(path) == traces


def test_trace_file_merges_repeated_layers(tmp_path):
    path = tmp_path / "trace.json"
    path.write_text(json.dumps({"n_experts": 2, "layers": [
        {"layer": 0, "counts": [1, 2]}, {"layer": 0, "counts": [3, 4]}]}))
    assert load_trace_file(path) == [RoutingTrace(0, (4, 6))]


def test_trace_file_width_mismatch(tmp_path):
    path = tmp_path / "trace.json"
    path.write_text(json.dumps({"n_experts": 3, "layers": [{"layer": 0, "counts": [1, 2]}]}))
    with pytest.raises(FormatError):
        load_trace_file(path)

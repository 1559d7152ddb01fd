"""Routing statistics: expert/group activation frequencies and grouping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateError, FormatError, ShapeError

__all__ = [
    "RoutingTrace",
    "GroupPlan",
    "aggregate_traces",
    "expert_frequencies",
    "build_group_plan",
    "group_frequencies",
    "save_trace_file",
    "load_trace_file",
]


@dataclass(frozen=True)
class RoutingTrace:
    """Raw per-expert activation tallies for one layer."""

    layer: int
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if self.layer < 0:
            raise ShapeError(f"layer index must be >= 0, got {self.layer}")
        if any(c < 0 for c in counts):
            raise ShapeError(f"layer {self.layer}: negative routing count")
        object.__setattr__(self, "counts", counts)

    @property
    def n_experts(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class GroupPlan:
    ordering: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    k: int
    m: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "m", len(self.groups))

    @property
    def n_experts(self) -> int:
        return len(self.ordering)

    def group_of(self) -> np.ndarray:
        """Array mapping expert index -> group index."""
        owner = np.empty(self.n_experts, dtype=np.int64)
        for g, members in enumerate(self.groups):
            owner[list(members)] = g
        return owner

    def to_dict(self) -> dict:
        return {"k": self.k, "m": self.m, "ordering": list(self.ordering),
                "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupPlan":
        return cls(ordering=tuple(d["ordering"]),
                   groups=tuple(tuple(g) for g in d["groups"]), k=int(d["k"]))


def aggregate_traces(traces: Iterable[RoutingTrace]) -> RoutingTrace:
    """Sum counts of several calibration batches for the same layer."""
    traces = list(traces)
    if not traces:
        raise DegenerateError("no traces to aggregate")
    layer = traces[0].layer
    n = traces[0].n_experts
    total = np.zeros(n, dtype=np.int64)
    for t in traces:
        if t.layer != layer or t.n_experts != n:
            raise ShapeError("cannot aggregate traces of different layers or widths")
        total += np.asarray(t.counts, dtype=np.int64)
    return RoutingTrace(layer=layer, counts=tuple(total.tolist()))


def expert_frequencies(trace: RoutingTrace) -> np.ndarray:
    z = np.asarray(trace.counts, dtype=np.float64)
    s = z.sum()
    if s <= 0:
        raise DegenerateError(
            f"layer {trace.layer}: all routing counts are zero; "
            "run calibration on a nonempty token set")
    return z / s


def build_group_plan(F: Sequence[float], k: int) -> GroupPlan:
    """Sort experts by frequency (descending, ties by index) and slice into groups of ``k``."""
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[0]
    if k < 1 or n % k != 0:
        raise ConfigurationError(f"group size k={k} does not divide n={n} experts")
    # lexsort: last key is primary -> (-F) ascending, then index ascending
    ordering = np.lexsort((np.arange(n), -F))
    groups = tuple(tuple(int(e) for e in ordering[i:i + k]) for i in range(0, n, k))
    return GroupPlan(ordering=tuple(int(e) for e in ordering), groups=groups, k=k)


def group_frequencies(trace: RoutingTrace, plan: GroupPlan) -> np.ndarray:
    z = np.asarray(trace.counts, dtype=np.float64)
    s = z.sum()
    if s <= 0:
        raise DegenerateError(f"layer {trace.layer}: all routing counts are zero")
    out = np.empty(plan.m)
    for g, members in enumerate(plan.groups):
        if any(not 0 <= e < z.shape[0] for e in members):
            raise ShapeError(f"group {g} references an expert outside 0..{z.shape[0] - 1}")
        out[g] = z[list(members)].sum() / s
    return out


def save_trace_file(path, traces: Sequence[RoutingTrace]) -> None:
    traces = sorted(traces, key=lambda t: t.layer)
    n = traces[0].n_experts if traces else 0
    doc = {"n_experts": n,
           "layers": [{"layer": t.layer, "counts": list(t.counts)} for t in traces]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_trace_file(path) -> list[RoutingTrace]:
    """Read a trace JSON file; repeated layer entries are summed."""
    try:
        doc = json.loads(Path(path).read_text())
        n = int(doc["n_experts"])
        entries = doc["layers"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable trace file ({exc})") from exc
    by_layer: dict[int, list[RoutingTrace]] = {}
    for e in entries:
        t = RoutingTrace(layer=int(e["layer"]), counts=tuple(e["counts"]))
        if t.n_experts != n:
            raise FormatError(f"{path}: layer {t.layer} has {t.n_experts} counts, expected {n}")
        by_layer.setdefault(t.layer, []).append(t)
    return [aggregate_traces(by_layer[k]) for k in sorted(by_layer)]

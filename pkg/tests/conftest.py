"""Shared fixtures and the acceptance summary printed at the end of a run."""

import numpy as np
import pytest

from moecomp.basis import TrainConfig
from moecomp.model_io import SyntheticSpec, generate_synthetic
from moecomp.pipeline import PipelineConfig

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or report.outcome == "failed":
        prev = _ACCEPTANCE.get(number, (title, "PASS", ""))
        outcome = "PASS" if report.passed and prev[1] == "PASS" else "FAIL"
        detail = dict(report.user_properties).get("detail", prev[2])
        _ACCEPTANCE[number] = (title, outcome, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[number]
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number}: {outcome}  {title}{suffix}")


@pytest.fixture(scope="session")
def small_model():
    return generate_synthetic(SyntheticSpec(n=8, p=8, d=16, layers=2, top_k=2,
                                            spectral_decay=0.5, router_skew=1.5, seed=3))


@pytest.fixture
def quick_config():
    return PipelineConfig(ratio=0.5, k=4, seed=1,
                          train=TrainConfig(steps=40, log_interval=20))


@pytest.fixture
def rng():
    return np.random.default_rng(0)

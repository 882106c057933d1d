"""Shared sweep fixtures and the per-criterion acceptance summary.

Acceptance tests carry ``@pytest.mark.criterion(n, title)``. Numbers and
strings passed to ``record_property("detail", ...)`` are printed next to the
verdict; a criterion passes only if every test tagged with it passed.
"""

import time

import pytest

from mrrswitch.config import ExperimentConfig
from mrrswitch.harness import run_bidirectional_sweep, run_multicast_sweep, run_unicast_sweep

_RESULTS: dict[int, dict] = {}


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig()


def _timed(fn, cfg):
    t0 = time.perf_counter()
    res = fn(cfg)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def unicast_sweep(default_cfg):
    """Full unicast sweep with baseline rows, and its wall time [s]."""
    return _timed(run_unicast_sweep, default_cfg)


@pytest.fixture(scope="session")
def multicast_sweep(default_cfg):
    return _timed(run_multicast_sweep, default_cfg)


@pytest.fixture(scope="session")
def bidirectional_sweep(default_cfg):
    return _timed(run_bidirectional_sweep, default_cfg)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _RESULTS.setdefault(n, {"title": title, "passed": True, "tests": 0, "details": []})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["tests"] += 1
        entry["passed"] &= report.passed
        if report.when == "call":
            entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        verdict = "PASS" if e["passed"] else "FAIL"
        tr.write_line(f"criterion {n:2d} {verdict}  {e['title']} ({e['tests']} tests)")
        for d in e["details"]:
            tr.write_line(f"             {d}")

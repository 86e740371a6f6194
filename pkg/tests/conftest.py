"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

from __future__ import annotations

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "slow: multi-seed training runs (tens of minutes)")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    entry = item.config.stash[_RESULTS].setdefault(marker.args[0], {"ok": True, "details": []})
    entry["ok"] &= rep.passed
    details = [v for k, v in item.user_properties if k == "detail"]
    entry["details"].extend(details or [f"{item.name}: {rep.outcome}"])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        entry = results[n]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  " + " | ".join(entry["details"]))

"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_RESULTS: dict = {}
_TIMES: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): exit criterion number this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n = m.args[0]
    if rep.when == "call" or rep.failed:
        ok = rep.passed if rep.when == "call" else False
        _RESULTS[n] = _RESULTS.get(n, True) and ok
        _TIMES[n] = _TIMES.get(n, 0.0) + rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status = "PASS" if _RESULTS[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({_TIMES[n]:.1f}s)")

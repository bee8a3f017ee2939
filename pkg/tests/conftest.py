"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

_TITLES = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion this test evidences")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    _TITLES[number] = title
    # a skipped or errored test counts against its criterion
    if rep.when == "call" or rep.failed or rep.skipped:
        _OUTCOMES.setdefault(number, []).append(rep.when == "call" and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status = "PASS" if all(_OUTCOMES[number]) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {_TITLES[number]}")

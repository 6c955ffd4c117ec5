"""Collects results of tests tagged ``@pytest.mark.criterion(n, title)`` and prints
one PASS/FAIL line per criterion at the end of the session. Tests may add a
short measurement via ``record_property("detail", text)``."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    _, ok, details = _RESULTS.get(number, (title, True, []))
    if report.when == "call" or report.failed:
        ok = ok and report.passed
    elif report.skipped:
        ok = False
    if report.when == "call":
        details = details + [v for k, v in item.user_properties if k == "detail"]
    _RESULTS[number] = (title, ok, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, details = _RESULTS[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += f"  ({'; '.join(details)})"
        terminalreporter.write_line(line)

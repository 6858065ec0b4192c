"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

import pytest

_outcomes: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown" and report.passed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed or report.skipped:
        _outcomes[number] = ("FAIL" if report.failed else "SKIP", title, detail)
    elif report.when == "call":
        _outcomes[number] = ("PASS", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        status, title, detail = _outcomes[number]
        line = f"criterion {number:2d}: {status}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)

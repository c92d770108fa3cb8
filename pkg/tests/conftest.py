"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.skipped and report.passed):
        return
    number, title = marker.args
    if report.skipped:
        status = "BLOCKED"
    elif report.failed:
        status = "FAIL"
    else:
        status = "PASS"
    detail = dict(item.user_properties).get("detail", "")
    if report.skipped and isinstance(report.longrepr, tuple):
        detail = report.longrepr[2].removeprefix("Skipped: ")
    prev = _RESULTS.get(number)
    # a criterion split over several tests passes only if all of them pass
    rank = {"PASS": 0, "BLOCKED": 1, "FAIL": 2}
    if prev is None or rank[status] > rank[prev[1]]:
        _RESULTS[number] = (title, status, detail)
    elif status == "PASS" and detail and prev[1] == "PASS":
        _RESULTS[number] = (title, status, "; ".join(filter(None, [prev[2], detail])))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail = _RESULTS[number]
        line = f"criterion {number} {title}: {status}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)

"""Prints one PASS/FAIL line per acceptance criterion at the end of the session."""

import re

_RESULTS: dict[int, tuple[str, str]] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    # the call phase decides, unless setup (the shared run) or teardown failed
    if m and (report.when == "call" or report.failed):
        detail = dict(report.user_properties).get("detail", "")
        _RESULTS[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())

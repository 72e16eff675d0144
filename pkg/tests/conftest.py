from __future__ import annotations

import re

_RESULTS: dict[int, tuple[str, str]] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    match = _NAME.search(report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    label = match.group(2).replace("_", " ")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _RESULTS[n] = (status, label)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, label = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {label}")

"""Collects the per-criterion verdict lines into one terminal summary block."""

import re

_NUM_RE = re.compile(r"test_criterion_(\d+)")
_LINE_RE = re.compile(r"^criterion \d+: (?:PASS|FAIL).*$", re.MULTILINE)

_verdicts: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    num = int(_NUM_RE.search(report.nodeid).group(1))
    m = _LINE_RE.search(report.capstdout or "")
    if m:
        _verdicts[num] = m.group(0)
    else:
        word = "PASS" if report.outcome == "passed" else "FAIL"
        _verdicts[num] = f"criterion {num}: {word}"


def pytest_terminal_summary(terminalreporter, exitstatus):
    if not _verdicts:
        return
    terminalreporter.section("acceptance summary")
    for num in sorted(_verdicts):
        terminalreporter.write_line(_verdicts[num])

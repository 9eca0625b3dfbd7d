"""Collects one PASS/FAIL line per acceptance criterion and prints them at
the end of the session (and therefore into test_output.txt)."""

import re

import pytest

_details = {}
_outcomes = {}
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


@pytest.fixture
def record(request):
    def _record(detail):
        _details[request.node.nodeid] = detail
        print(detail)
    return _record


def pytest_runtest_logreport(report):
    if not _NAME.search(report.nodeid):
        return
    if report.when == "call" or report.failed:
        if report.failed or report.nodeid not in _outcomes:
            _outcomes[report.nodeid] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_outcomes, key=lambda s: int(_NAME.search(s).group(1))):
        num, name = _NAME.search(nodeid).groups()
        title = name.replace("_", " ")
        line = f"criterion {int(num):2d}  {_outcomes[nodeid]}  {title}"
        if nodeid in _details:
            line += f"  ({_details[nodeid]})"
        terminalreporter.write_line(line)

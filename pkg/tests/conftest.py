"""Collects the one-line verdicts of the acceptance criteria for the run summary."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Call with (criterion number, passed, detail) to record a result line."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])

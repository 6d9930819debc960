"""Collects the acceptance verdicts and prints them after the test summary."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one PASS/FAIL line for criterion ``n``."""

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _VERDICTS[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])

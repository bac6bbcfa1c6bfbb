"""Shared pytest plumbing for the test suite.

The acceptance battery records one verdict line per criterion; this hook
replays them in the terminal summary so they are visible even when pytest
captures per-test stdout (i.e. without ``-s``).
"""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)

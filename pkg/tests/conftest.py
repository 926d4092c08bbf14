"""Shared pytest plumbing.

Collects the one-line verdicts emitted by the acceptance tests and replays
them as a summary section, so they stay visible when output capture is on.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)

"""Shared pytest wiring: surfaces the acceptance checklist in the summary."""

import acceptance_report


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_report.lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

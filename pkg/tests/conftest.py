import _acceptance_log


def pytest_terminal_summary(terminalreporter):
    lines = _acceptance_log.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

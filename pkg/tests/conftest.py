import _gate


def pytest_terminal_summary(terminalreporter):
    if not _gate.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_gate.VERDICTS):
        terminalreporter.write_line(_gate.VERDICTS[n])

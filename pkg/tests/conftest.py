import sys


def pytest_terminal_summary(terminalreporter):
    # acceptance lines are written under capture, so repeat them here
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)

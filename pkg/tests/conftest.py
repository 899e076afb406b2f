import sys

CRITERIA = range(1, 10)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    verdicts = module.VERDICTS
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        terminalreporter.write_line(verdicts.get(n, f"criterion {n}: FAIL - test did not complete"))

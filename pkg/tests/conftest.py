"""Collects the acceptance verdicts and prints them after the run."""

ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

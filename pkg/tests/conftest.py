"""Shared pytest hooks: the acceptance suite's pass/fail lines go into the terminal summary."""

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str = "") -> bool:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])

"""Shared pytest plumbing: the acceptance suite records one verdict line per
criterion, and the lines are echoed in the terminal summary so they show up
even without ``-s``."""

ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[criterion])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])

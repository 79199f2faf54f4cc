"""Shared pytest hooks: acceptance-criterion verdicts are collected here and
printed as one line each at the end of the run."""

CRITERIA: dict[int, tuple[str, bool, str]] = {}
EXTRA_LINES: list[str] = []


def record(number: int, name: str, passed: bool, detail: str) -> bool:
    CRITERIA[number] = (name, bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(CRITERIA):
        name, passed, detail = CRITERIA[number]
        tr.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    for line in EXTRA_LINES:
        tr.write_line(line)

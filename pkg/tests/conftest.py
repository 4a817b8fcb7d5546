from __future__ import annotations

CRITERIA: dict[int, str] = {}


def record(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[n] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])

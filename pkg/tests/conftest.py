import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}" + (f" ({detail})" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

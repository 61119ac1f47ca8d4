import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def report():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def record(name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[name] = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(ACCEPTANCE_LINES[name])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[name])

import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the pass flag for the caller to assert."""
    def record(num: int, title: str, ok: bool, detail: str, seconds: float, budget_s: float) -> bool:
        ok = bool(ok) and seconds < budget_s
        line = f"{'PASS' if ok else 'FAIL'}  criterion {num}: {title} | {detail} | {seconds:.1f}s (budget {budget_s:.0f}s)"
        _ACCEPTANCE[num] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[num])

import pytest

# criterion number -> list of (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records one acceptance check."""
    def record(n: int, passed: bool, detail: str) -> bool:
        CRITERIA.setdefault(n, []).append((bool(passed), detail))
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        checks = CRITERIA[n]
        ok = all(p for p, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

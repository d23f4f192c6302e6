import pytest

CRITERIA = pytest.StashKey[dict]()
N_CRITERIA = 10


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number, passed, detail=""):
        request.config.stash.setdefault(CRITERIA, {})[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(CRITERIA, {})
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in rows:
            passed, detail = rows[n]
            terminalreporter.line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.line(f"criterion {n:2d}: NOT RUN")

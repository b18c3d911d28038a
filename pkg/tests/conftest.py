import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns ``ok``."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

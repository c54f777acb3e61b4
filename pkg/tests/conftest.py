import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion_line(request):
    """Record ``[PASS]/[FAIL] criterion N: detail``; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("criterion ", 1)[1]):
            terminalreporter.write_line(line)

import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Record one acceptance line, print it, and fail the test if it did not pass."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        lines[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])

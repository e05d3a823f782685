import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def report(request):
    """Record one acceptance line, echo it, then assert the outcome."""
    lines = request.config.stash[_LINES_KEY]

    def _report(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append((n, line))
        print("\n" + line)
        assert ok, detail

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

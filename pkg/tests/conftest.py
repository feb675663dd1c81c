import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion(request):
    """``criterion(num, title, ok, detail)`` records one acceptance verdict and asserts it."""
    lines = request.config.stash[_LINES_KEY]

    def record(num: int, title: str, ok: bool, detail: str) -> None:
        line = f"[criterion {num:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

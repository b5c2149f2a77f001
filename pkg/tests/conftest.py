import pytest

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Recorder for acceptance-criterion lines shown in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)

import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance outcome; the summary prints one line per criterion."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        _CRITERIA[number] = (title, passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {title}: {detail}")

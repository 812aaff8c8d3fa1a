import pytest

_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)

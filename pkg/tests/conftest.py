import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion(number, name, passed, detail)``."""

    def record(number, name, passed, detail=""):
        _ACCEPTANCE.append((number, name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {name}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)

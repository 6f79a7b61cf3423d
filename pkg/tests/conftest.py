import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"C{number:<2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
    npass = sum(" PASS " in v for v in _CRITERIA.values())
    terminalreporter.write_line(f"{npass}/{len(_CRITERIA)} criteria pass")

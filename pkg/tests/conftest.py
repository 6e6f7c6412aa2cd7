import pytest

_RESULTS = {}


@pytest.fixture(scope="session")
def criterion_log():
    """Collects ``(passed, detail)`` per acceptance criterion for the summary."""
    return _RESULTS


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS):
        passed, detail = _RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, title, passed, detail)`` records and prints one criterion line, then asserts."""

    def record(n, title, passed, detail):
        line = f"CRITERION {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

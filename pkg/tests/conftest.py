import pytest

import test_acceptance


def pytest_terminal_summary(terminalreporter):
    lines = test_acceptance.VERDICTS
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(n, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
        test_acceptance.VERDICTS[n] = line
        print(line)
        assert passed, line
    return record

import pytest

_RESULTS = []


@pytest.fixture(scope="session")
def criterion_report():
    """Call ``report(n, name, passed, detail)`` once per acceptance criterion."""
    def report(n, name, passed, detail=""):
        line = f"CRITERION {n} {'PASS' if passed else 'FAIL'}: {name}"
        if detail:
            line += f" ({detail})"
        _RESULTS.append((n, line))
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_RESULTS):
            terminalreporter.write_line(line)

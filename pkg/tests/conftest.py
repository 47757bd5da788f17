import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Collects one verdict line per acceptance criterion."""
    def add(number, name, ok, seconds, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}  ({seconds:.1f}s) {detail}".rstrip()
        ACCEPTANCE_LINES.append((number, line))
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)

import pytest

# (label, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES = []


def record(label, passed, detail=""):
    line = f"{label}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

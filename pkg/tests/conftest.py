import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA = {}


@pytest.fixture
def record():
    def _record(number, title, passed, detail=""):
        CRITERIA[number] = (title, bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)

import pytest

# criterion number -> list of (description, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    def record(number: int, description: str, passed: bool, detail: str = ""):
        ACCEPTANCE.setdefault(number, []).append((description, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(passed for _, passed, _ in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}")
        for description, passed, detail in parts:
            line = f"    {'pass' if passed else 'FAIL'}  {description}"
            if detail:
                line += f"  [{detail}]"
            terminalreporter.write_line(line)

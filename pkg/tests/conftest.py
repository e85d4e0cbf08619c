import pytest

# criterion number -> (passed, detail), filled by the acceptance suite
ACCEPTANCE: dict = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{title}]: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])

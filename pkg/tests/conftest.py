import pytest


def pytest_configure(config):
    config.acceptance = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert it so the test fails with the same message."""
    table = request.config.acceptance

    def record(number: int, ok: bool, detail: str):
        table[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = getattr(config, "acceptance", {})
    if not table:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(table):
        ok, detail = table[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

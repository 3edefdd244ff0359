import pytest


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._criteria[number] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record (and immediately print) one pass/fail line per acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def add(n: int, ok: bool, detail: str):
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

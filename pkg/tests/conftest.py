import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """``record(n, ok, detail)`` stores one result line per acceptance criterion and returns ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

import pytest

# acceptance verdicts, filled by tests/test_acceptance.py
VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        VERDICTS[name] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(VERDICTS, key=lambda k: int(k[1:].split()[0])):
        ok, detail = VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())

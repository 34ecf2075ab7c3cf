import pytest

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """record(n, name, ok, detail) stores one line for the terminal summary."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[n] = (name, bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:2d}. {name}  {detail}")

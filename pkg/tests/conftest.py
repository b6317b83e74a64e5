import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion."""

    def log(number: int, title: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        print(_ACCEPTANCE[-1])
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)

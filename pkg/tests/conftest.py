import pytest

_RESULTS: dict[int, tuple[bool, str, str]] = {}


class CriterionReport:
    """Records one acceptance line, prints it immediately and fails the test when it does not hold."""

    def __call__(self, number: int, title: str, ok: bool, detail: str) -> None:
        ok = bool(ok)
        _RESULTS[number] = (ok, title, detail)
        print(_line(number, ok, title, detail))
        assert ok, f"criterion {number} ({title}): {detail}"


def _line(number, ok, title, detail):
    return f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


@pytest.fixture
def criterion():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(_line(n, *_RESULTS[n]))

"""Shared pytest hooks: one PASS/FAIL summary line per acceptance criterion."""

import pytest

_VERDICTS: dict[int, str] = {}


def _line(number: int, ok: bool, title: str, detail: str) -> str:
    return f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")


@pytest.fixture
def verdict():
    """``verdict(number, title, ok, detail)`` records the outcome and asserts it."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = _line(number, bool(ok), title, detail)
        _VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" or not report.failed:
        return
    number = marker.args[0]
    if number not in _VERDICTS:
        # crashed before reaching its verdict
        _VERDICTS[number] = _line(number, False, item.name, str(call.excinfo.value).splitlines()[0][:120])


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])

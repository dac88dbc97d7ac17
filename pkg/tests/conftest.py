"""Per-criterion pass/fail lines for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n, "title")`` report their outcome in a
terminal summary section; measured values added through the ``detail``
fixture are appended to the line.
"""
import pytest

_OUTCOMES: dict[int, tuple[str, bool, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    marker = request.node.get_closest_marker("criterion")
    notes: list[str] = []
    request.node._criterion_notes = notes
    return notes.append if marker else (lambda _: None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    notes = getattr(item, "_criterion_notes", [])
    prev = _OUTCOMES.get(number)
    passed = report.passed and (prev is None or prev[1])
    _OUTCOMES[number] = (title, passed, (prev[2] if prev else []) + notes)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        title, passed, notes = _OUTCOMES[number]
        extra = f"  ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title}{extra}")

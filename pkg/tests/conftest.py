"""Collects one PASS/FAIL verdict per acceptance criterion and prints them after the run."""

import pytest

_VERDICTS: dict = {}
_DETAILS: dict = {}


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the criterion of the calling test."""
    m = request.node.get_closest_marker("criterion")

    def note(text):
        _DETAILS.setdefault(m.args[0], []).append(text)

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.skipped:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        n = m.args[0]
        _VERDICTS[n] = _VERDICTS.get(n, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status = "PASS" if _VERDICTS[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {'; '.join(_DETAILS.get(n, []))}")

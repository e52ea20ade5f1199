"""Criterion bookkeeping for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``; the
terminal summary prints one pass/fail line per criterion together with any
values the tests chose to record through the ``record`` fixture.
"""
import sys
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_TITLES = {}
_OUTCOMES = defaultdict(list)
_NOTES = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def _criterion_of(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    n = mark.args[0]
    _TITLES.setdefault(n, mark.args[1] if len(mark.args) > 1 else "")
    return n


def pytest_collection_modifyitems(items):
    for item in items:
        n = _criterion_of(item)
        if n is not None:
            item.user_properties.append(("criterion", n))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    n = dict(item.user_properties).get("criterion")
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES[n].append((item.name, report.passed, report.skipped))


@pytest.fixture
def record(request):
    """``record("text")`` attaches a line to the test's criterion in the summary."""
    n = dict(request.node.user_properties).get("criterion")

    def _add(text):
        _NOTES[n].append(f"{request.node.name}: {text}")

    return _add


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_TITLES):
        results = _OUTCOMES.get(n, [])
        if not results:
            verdict = "NOT RUN"
        elif all(ok or skipped for _, ok, skipped in results) and any(ok for _, ok, _ in results):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        failed = [name for name, ok, skipped in results if not ok and not skipped]
        line = f"criterion {n}: {verdict}  {_TITLES[n]}"
        if failed:
            line += f"  (failed: {', '.join(failed)})"
        tr.write_line(line)
        for note in _NOTES.get(n, []):
            tr.write_line(f"    {note}")

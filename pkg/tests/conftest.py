"""Acceptance reporting: one pass/fail line per criterion in the terminal summary."""
import pytest

RESULTS = {}  # number -> [title, passed, details]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = RESULTS.setdefault(number, [title, True, []])
    entry[1] = entry[1] and rep.passed


@pytest.fixture
def report(request):
    """Record a measured value shown under the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    entry = RESULTS.setdefault(number, [title, True, []])
    return entry[2].append


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, passed, details = RESULTS[number]
        tr.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}")
        for d in details:
            tr.write_line(f"    {d}")

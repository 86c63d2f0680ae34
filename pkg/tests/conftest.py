import pytest

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def report(request):
    """Record the measured outcome of an acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")

    def record(passed, detail):
        CRITERIA[marker.args[0]] = (bool(passed), detail)
        return passed
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n = marker.args[0]
    if rep.failed:
        detail = CRITERIA.get(n, (False, "raised before measuring"))[1]
        CRITERIA[n] = (False, detail)
    elif n not in CRITERIA:
        CRITERIA[n] = (True, "")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

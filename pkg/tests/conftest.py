import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance report."""
    notes = []
    request.node._acceptance_detail = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    notes = "; ".join(getattr(item, "_acceptance_detail", []))
    _RESULTS[number] = (title, "PASS" if report.passed else "FAIL", notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, verdict, notes = _RESULTS[number]
        line = f"{verdict} {number:>2}. {title}"
        terminalreporter.write_line(line + (f" ({notes})" if notes else ""))

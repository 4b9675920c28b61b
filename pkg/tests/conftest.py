import pytest

_RESULTS: dict[str, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion id")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _RESULTS[number] = (status, title, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS, key=lambda n: int(n)):
        status, title, secs = _RESULTS[number]
        tr.write_line(f"{status}  criterion {number:>2}  {title}  ({secs:.1f}s)")
    passed = sum(s == "PASS" for s, _, _ in _RESULTS.values())
    tr.write_line(f"{passed}/{len(_RESULTS)} criteria passed")

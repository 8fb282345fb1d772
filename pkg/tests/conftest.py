import pytest

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion verified by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed and not report.skipped):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.skipped:
        status, detail = "SKIP", str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else detail
    else:
        status = "PASS" if report.passed else "FAIL"
    if status != "PASS" or report.when == "call":
        _VERDICTS[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, status, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number} {status:<4}  {title}" + (f": {detail}" if detail else ""))

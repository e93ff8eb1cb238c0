
import pytest

_RESULTS: dict[int, dict] = {}

@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "tests": 0})
    entry["ok"] &= not report.failed
    if report.when == "call":
        entry["seconds"] += report.duration
        entry["tests"] += 1

def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        status = "PASS" if r["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number} {status}  {r['title']}  ({r['tests']} tests, {r['seconds']:.1f}s)")

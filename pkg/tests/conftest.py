"""Acceptance summary: one PASS/FAIL line per criterion after the run."""

import pytest

_results = {}


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    number, title = crit
    entry = _results.setdefault(number, {"title": title, "ok": True, "ran": False, "details": []})
    if report.when == "call":
        entry["ran"] = True
        entry["details"] += [v for k, v in report.user_properties if k == "detail"]
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


@pytest.fixture(autouse=True)
def _criterion(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", tuple(marker.args)))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        e = _results[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        line = f"criterion {number:2d} {status}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)

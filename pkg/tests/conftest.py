"""Collects ``criterion`` markers and prints one verdict line per acceptance criterion."""

_verdicts: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    number = report.user_properties and dict(report.user_properties).get("criterion")
    if not number:
        return
    entry = _verdicts.setdefault(number[0], {"title": number[1], "ok": True})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_itemcollected(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", tuple(marker.args)))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        entry = _verdicts[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {entry['title']}")

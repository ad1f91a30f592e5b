"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    # an expected failure is still a failure of the criterion
    entry["ok"] &= rep.passed and not hasattr(rep, "wasxfail")
    if rep.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        notes = f"  ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}{notes}")

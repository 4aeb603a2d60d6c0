import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, text = mark.args
    entry = _criteria.setdefault(number, {"text": text, "ok": True, "detail": []})
    if report.failed or report.skipped:
        entry["ok"] = False
        entry["detail"].append(f"{item.name}: {report.outcome}")
    detail = getattr(item, "criterion_detail", None)
    if report.when == "call" and detail:
        entry["detail"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        line = f"[{'PASS' if c['ok'] else 'FAIL'}] {number}. {c['text']}"
        if c["detail"]:
            line += "  (" + "; ".join(c["detail"]) + ")"
        tr.write_line(line)

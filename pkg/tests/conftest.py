import re

_CRITERION = re.compile(r"test_c(\d\d)([a-z]?)_")
_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    cid = f"{int(m.group(1))}{m.group(2)}"
    entry = _outcomes.setdefault(cid, {"ok": True, "details": []})
    entry["ok"] &= report.passed
    detail = dict(report.user_properties).get("detail")
    if detail:
        entry["details"].append(detail)
    elif report.failed and report.when != "call":
        entry["details"].append(f"{report.when} error")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda c: (int(re.match(r"\d+", c).group()), c)
    for cid in sorted(_outcomes, key=key):
        entry = _outcomes[cid]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {cid}: " + " | ".join(entry["details"]))

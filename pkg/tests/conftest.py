import re

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(a\d+)_", report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        outcome = "PASS" if report.passed else "FAIL"
        if report.skipped:
            outcome = "SKIP"
        prev = _CRITERIA.get(key)
        if prev is None or prev[0] == "PASS":
            _CRITERIA[key] = (outcome, detail or (prev[1] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k[1:])):
        outcome, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{key} {outcome}  {detail}".rstrip())

"""Collects the outcome of every ``test_criterion_NN_*`` test and prints one line per criterion."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    key = int(match.group(1))
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    measured = "; ".join(str(v) for k, v in report.user_properties if k == "measured")
    prev = _results.get(key)
    if prev is not None and prev[1] == "FAIL":
        return
    if prev is None or report.when == "call" or failed:
        _results[key] = (match.group(2).replace("_", " "), "FAIL" if failed else report.outcome.upper(),
                         measured or (prev[2] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results):
        name, status, measured = _results[key]
        status = "PASS" if status == "PASSED" else status
        line = f"criterion {key:2d} {status:4s}  {name}"
        terminalreporter.write_line(line + (f"  [{measured}]" if measured else ""))

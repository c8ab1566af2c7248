"""Per-criterion PASS/FAIL summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``;
a criterion passes only if every tagged test passed (strict xfails count
as failures here because they mark a missed target).
"""

_CRITERIA = {}      # n -> title
_OUTCOMES = {}      # n -> list of outcome strings


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test checks")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            _CRITERIA[n] = title
            item.user_properties.append(("criterion", n))


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    if report.when == "call":
        _OUTCOMES.setdefault(n, []).append("failed" if report.failed or hasattr(report, "wasxfail") else report.outcome)
    elif report.failed:     # setup / teardown error
        _OUTCOMES.setdefault(n, []).append("failed")
    elif report.when == "setup" and report.skipped:
        _OUTCOMES.setdefault(n, []).append("skipped")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        got = _OUTCOMES.get(n, [])
        if not got or all(o == "skipped" for o in got):
            status = "NOT RUN"
        elif any(o == "failed" for o in got):
            status = "FAIL"
        elif all(o == "passed" for o in got):
            status = "PASS"
        else:
            status = "PARTIAL"
        tr.write_line(f"criterion {n}: {status}  {_CRITERIA[n]}")

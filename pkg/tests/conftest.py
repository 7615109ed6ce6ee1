import pytest

CRITERIA = {
    1: "closed-form correlation vs quadrature",
    2: "white-noise convolution covariance",
    3: "positive definiteness on the 21x21 lattice",
    4: "geometry invariants",
    5: "sampler calibration",
    6: "parameter recovery",
    7: "stationarity limit",
    8: "prediction oracle",
    9: "end-to-end reproducibility",
}

_outcomes = {}
_details = {}


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args[0] if mark else None


def pytest_collection_modifyitems(items):
    for item in items:
        k = _criterion(item)
        if k is not None:
            _outcomes.setdefault(k, {})[item.nodeid] = None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    k = _criterion(item)
    if k is None:
        return
    for name, value in report.user_properties:
        if name == "detail" and value:
            _details.setdefault(k, []).append(value)
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _outcomes[k][item.nodeid] = False
    elif report.when == "call" and report.passed and _outcomes[k][item.nodeid] is None:
        _outcomes[k][item.nodeid] = True


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_outcomes):
        results = _outcomes[k].values()
        if any(r is None for r in results) and not any(r is False for r in results):
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {k} ({CRITERIA[k]}): {status}")
        for detail in dict.fromkeys(_details.get(k, [])):
            terminalreporter.write_line(f"    {detail}")

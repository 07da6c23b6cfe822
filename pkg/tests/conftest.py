import os

# runtime bounds in the acceptance suite are stated for one CPU core
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "status": "PASS", "detail": []})
    if report.when == "call" or report.failed or report.skipped:
        if report.failed:
            entry["status"] = "FAIL"
            entry["detail"].append(item.name)
        elif report.skipped and entry["status"] != "FAIL":
            entry["status"] = "SKIP"
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            entry["detail"].append(reason)
        for key, value in item.user_properties:
            if key == "measured":
                entry["detail"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        detail = "; ".join(dict.fromkeys(entry["detail"]))
        line = f"criterion {n:>2} {entry['status']:<4} {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))

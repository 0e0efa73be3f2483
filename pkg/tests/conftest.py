import os

import pytest


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run slow tests such as the 2M-step training run (or set RACEAVOID_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or os.environ.get("RACEAVOID_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; enable with --run-slow or RACEAVOID_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# acceptance summary: one PASS/FAIL/SKIP line per criterion at the end of the run
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if report.outcome == "skipped" and not detail:
            detail = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else ""
        _CRITERIA[n] = (status, name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {name}  {detail}".rstrip())

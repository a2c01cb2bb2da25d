import numpy as np
import pytest

from tstar.tensorcore import Rng

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    info = getattr(report, "criterion", None)
    if info is not None:
        _criteria[info] = "PASS" if report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), verdict in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {num:>2} {verdict}  {title}")


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240611)

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("flowlab", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("flowlab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config._flowlab_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    table = item.config._flowlab_criteria
    key = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        table[key] = "PASS" if rep.passed else "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = getattr(config, "_flowlab_criteria", {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), verdict in sorted(table.items()):
        terminalreporter.write_line(f"{verdict} #{number:>2} {title}")

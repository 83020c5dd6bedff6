import collections

import pytest

# criterion number -> short description; filled by @pytest.mark.criterion
_CRITERIA = {}
_OUTCOMES = collections.defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA[number] = title
            item.user_properties.append(("criterion", number))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed or report.skipped:
        _OUTCOMES[props["criterion"]].append(report.passed and report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _OUTCOMES.get(number, [])
        status = "PASS" if results and all(results) else ("FAIL" if results else "NOT RUN")
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {_CRITERIA[number]}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)

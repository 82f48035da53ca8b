import pytest

from essnet.data import DatasetConfig, build_dataset
from essnet.networks import DiscriminatorConfig, GeneratorConfig
from essnet.trainer import TrainConfig

TINY_DATA = DatasetConfig(height=32, width=32, n_a_train=4, n_a_val=2, n_b_train=3, n_b_val=2, n_b_test=3, seed=11)
TINY_TRAIN = TrainConfig(epochs=2, generator=GeneratorConfig(4, 1), discriminator=DiscriminatorConfig(4, 3),
                         pool_size=3, seed=3)


@pytest.fixture
def tiny_bundle():
    return build_dataset(TINY_DATA)


@pytest.fixture
def tiny_config():
    return TINY_TRAIN


# one PASS/FAIL line per acceptance criterion, printed after the run
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.failed or report.when == "call":
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _criteria[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict, detail = _criteria[number]
        line = f"criterion {number} [PRIMARY] {verdict}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))

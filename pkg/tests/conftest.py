import pytest

from fedledger.config import ExperimentConfig
from fedledger.model import ModelConfig

_ACCEPTANCE: list[tuple[int, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _ACCEPTANCE.append((number, title, status))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")


@pytest.fixture
def tiny_model():
    return ModelConfig(in_channels=2, window_len=12, conv_layers=1, conv_filters=3,
                       filter_size=3, hidden_units=4, num_classes=3)


def make_tiny_experiment(**changes) -> ExperimentConfig:
    base = ExperimentConfig.from_dict({
        "dataset": {"num_classes": 3, "samples_per_class": 120, "sample_rate_hz": 20},
        "model": {"in_channels": 3, "window_len": 16, "conv_layers": 1, "conv_filters": 4,
                  "filter_size": 3, "hidden_units": 4, "num_classes": 3},
        "train": {"learning_rate": 1e-2, "batch_size": 16},
        "num_clients": 3, "rounds": 2, "folds": 2, "runs": 1,
    })
    return base.replace(**changes) if changes else base


@pytest.fixture
def tiny_experiment():
    return make_tiny_experiment()

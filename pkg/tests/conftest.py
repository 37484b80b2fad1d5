import numpy as np
import pytest

from zol.envs import collect_donut
from zol.fbmodel import FBModel, FBTrainConfig, train_fb


@pytest.fixture(scope="session")
def donut_data():
    return collect_donut(100_000, 0.6, 0)


@pytest.fixture(scope="session")
def donut_pretrained(donut_data):
    """Default-config pretraining on the default donut dataset (the slow part of the suite)."""
    model, losses = train_fb(donut_data, FBTrainConfig())
    return model, losses


@pytest.fixture
def small_model():
    cfg = FBTrainConfig(d=4, f_hidden=(8,), b_hidden=(6,), hidden_activation="tanh", gamma=0.9)
    return FBModel.init(2, np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]]), cfg,
                        np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])

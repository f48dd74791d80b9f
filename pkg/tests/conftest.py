from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from bevdistill.config import DataConfig, TrainConfig
from bevdistill.dataset import load_dataset

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def small_config(**overrides) -> TrainConfig:
    """A few tiny scenes on the default grid, quick enough for unit tests."""
    base = TrainConfig(
        c_v=8,
        c_b=8,
        epochs=1,
        teacher_epochs=1,
        data=DataConfig(train_scenes=4, val_scenes=2, class_counts=(40, 30, 20, 30)),
    )
    return replace(base, **overrides).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    cfg = small_config()
    return cfg, load_dataset(cfg)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

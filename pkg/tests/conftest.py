import numpy as np
import pytest
import torch
from hypothesis import settings

from cilcompress import config, data

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")
torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**overrides) -> config.ExperimentConfig:
    flat = {
        "num_tasks": 3,
        "dataset.num_classes": 12,
        "dataset.train_per_class": 24,
        "dataset.test_per_class": 10,
        "dataset.image_size": 12,
        "dataset.pretrain_fraction": 0.25,
        "student.width": 0.5,
        "teacher.width": 1.0,
        "optim.epochs": 1,
        "optim.batch_size": 16,
        "pretrain.epochs": 1,
        "checkpoints": False,
    }
    flat.update(overrides)
    return config.from_flat(flat)


@pytest.fixture(scope="session")
def tiny_splits():
    return data.make_synthetic(num_classes=12, train_per_class=24, test_per_class=10, image_size=12, seed=3)


@pytest.fixture
def tiny_stream(tiny_splits):
    return data.split_classes(tiny_splits, 3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

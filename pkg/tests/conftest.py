import numpy as np
import pytest

from adarand.harness.config import ExperimentConfig

# Lines recorded by the acceptance module, echoed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rs():
    """Plain numpy generator for building random test instances."""
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    """A few-second experiment for harness plumbing tests."""
    return ExperimentConfig().with_updates(**{
        "dataset.input_dim": 12,
        "dataset.latent_dim": 4,
        "dataset.num_classes": 3,
        "dataset.source_classes": 6,
        "dataset.modes_per_class": 2,
        "dataset.samples_per_class": 12,
        "dataset.test_per_class": 10,
        "dataset.source_samples_per_class": 20,
        "model.hidden": [16, 16],
        "model.feature_dim": 6,
        "optim.epochs": 4,
        "optim.milestones": [2, 3],
        "pretrain.epochs": 3,
        "pretrain.milestones": [2],
        "diagnostics.pca_samples": 30,
    })

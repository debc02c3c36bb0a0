import numpy as np
import pytest
import torch

from stpvad.synthworld import generate_scene, tiny_configs


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_datasets():
    train_cfg, test_cfg = tiny_configs(seed=3)
    return generate_scene(train_cfg), generate_scene(test_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])

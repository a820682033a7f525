import numpy as np
import pytest
import torch
from loguru import logger

torch.set_num_threads(1)
logger.remove()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_MODEL = dict(embed_dim=8, heads=2, depth=2, mlp_hidden=16, d_f=8, sim_pool=6)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from semirest.dataset import load_dataset, synth_dataset

    root = tmp_path_factory.mktemp("tiny") / "data"
    synth_dataset(root, n_normal=4, n_defect=4, n_test_normal=2, seed=5)
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_setup(tiny_dataset):
    """Small config, bank and training data shared by the training tests."""
    from semirest.config import TrainConfig
    from semirest.pipeline import build_bank
    from semirest.training import build_training_data

    cfg = TrainConfig(setting="semi", steps=5, seed=3, **TINY_MODEL)
    bank = build_bank(tiny_dataset.train_normal, cfg)
    data = build_training_data(tiny_dataset, bank, cfg, real_labels="boxes")
    return cfg, bank, data


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, passed, detail)``."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

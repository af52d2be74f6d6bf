import numpy as np
import pytest

from src.data.synthdata import DatasetSpec, make_dataset, text_world
from src.head.config import HeadConfig
from src.head.pvlr_head import PvlrHead
from src.text.text_sim import LabelVocabulary
from src.training.config import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, only with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return DatasetSpec(C=4, d=8, M=6, K=2, n_train=24, n_test=12, seed=3, n_pl=1, core_labels=2)


@pytest.fixture
def tiny_data(tiny_spec):
    table, encoder = text_world(tiny_spec)
    return make_dataset(tiny_spec, table=table, encoder=encoder)


def make_head(spec: DatasetSpec, seed: int = 0, vocab: LabelVocabulary = None, **toggles) -> PvlrHead:
    config = HeadConfig(C=spec.C, d=spec.d, M=spec.M, L=toggles.pop("L", 2), **toggles)
    table, encoder = text_world(spec, config.d_tok)
    return PvlrHead(config, vocab or LabelVocabulary.default(spec.C), table, encoder, seed=seed)


@pytest.fixture
def tiny_config(tmp_path, tiny_spec):
    """A config that trains in a couple of seconds."""
    config = TrainConfig(dataset=tiny_spec, output_dir=str(tmp_path / "runs"), run_name="tiny")
    config.head.L = 2
    config.train.epochs = 2
    config.train.batch_size = 8
    config.train.lr_max = 5e-3
    config.train.ema_decay = 0.9
    config.experiments.seeds = [0, 1]
    config.experiments.timing_batches = 1
    return config.resolve()

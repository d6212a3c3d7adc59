import numpy as np
import pytest
import torch

from align_gen_app.schemas import DemConfig, DitConfig, LoraConfig, SampleConfig, TrainConfig
from align_gen_app.services.model import AlignGenModel
from align_gen_app.services.promptkit import default_vocabulary
from align_gen_app.services.synthdata import gen_catalog, make_concept, make_pair_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def small_config():
    return DitConfig(d=16, blocks=1, heads=2, patch=4, image_side=16, mlp_ratio=2, max_text_len=16,
                     redux_tokens=4, redux_patch=4, lora=LoraConfig(rank=2), dem=DemConfig(heads=2, mlp_ratio=2))


@pytest.fixture()
def model(small_config, vocab):
    torch.manual_seed(0)
    return AlignGenModel(small_config, vocab)


@pytest.fixture()
def red_square():
    return make_concept("square", "red", "plain")


@pytest.fixture(scope="session")
def catalog():
    return gen_catalog(24, np.random.default_rng(7))


@pytest.fixture(scope="session")
def pairs(catalog):
    return make_pair_dataset(catalog, np.random.default_rng(3), pairs_per_concept=4)


@pytest.fixture()
def adapt_config():
    return TrainConfig(phase="adapt", batch_size=4, iterations=2, lr=1e-3, log_every=0)


@pytest.fixture()
def pretrain_config():
    return TrainConfig(phase="pretrain", batch_size=4, iterations=2, lr=1e-3, log_every=0)


@pytest.fixture()
def fast_sampling():
    return SampleConfig(steps=2, guidance=1.0, seed=5)

import pytest
import torch

from src.config import make_config
from src.corpus import build_vocab, generate_corpus, split_records
from src.model import build_model


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY = dict(
    d=4, e=8, heads=2, layers=1, ff_mult=2, h=16, w=16, max_len=64,
    n=60, k=2, q=16, batch=4, epochs_stage1=1, epochs_stage2=1, seed=3,
)


@pytest.fixture
def tiny_config():
    return make_config(**TINY)


@pytest.fixture
def tiny_corpus(tiny_config):
    c = tiny_config
    return generate_corpus(c.seed, c.n, c.d, c.h, c.w)


@pytest.fixture
def tiny_splits(tiny_corpus, tiny_config):
    return split_records(tiny_corpus, tiny_config.split)


@pytest.fixture
def tiny_vocab(tiny_splits):
    return build_vocab(tiny_splits["train"])


@pytest.fixture
def tiny_model(tiny_config, tiny_vocab):
    model = build_model(tiny_config, len(tiny_vocab))
    model.eval()
    return model


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)


@pytest.fixture(scope="session")
def stage1_run():
    """One tiny stage-1 training run shared by the slower tests."""
    from src.trainer import run_stage1

    config = make_config(**TINY)
    corpus = generate_corpus(config.seed, config.n, config.d, config.h, config.w)
    return config, corpus, run_stage1(config, corpus, progress=False)

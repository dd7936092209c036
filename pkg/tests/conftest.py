import numpy as np
import pytest

from mrCore.envsim import WorldSpec, build_world, gen_behavior_data
from mrCore.model import ModelConfig
from mrCore.stitchtoy import build_stitch_toy


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_spec():
    return WorldSpec(n_users=20, n_items=8, d_f=4, k=5, max_steps=6, seed=3)


@pytest.fixture
def small_world(small_spec):
    return build_world(small_spec)


@pytest.fixture
def small_dataset(small_world):
    return gen_behavior_data(small_world, eps=0.3, episodes=12, seed=1, n_bins=8)


@pytest.fixture
def tiny_cfg(small_dataset):
    return ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, T_max=6,
                       state_dim=small_dataset.state_dim, n_items=small_dataset.catalog_size,
                       return_bins=tuple(small_dataset.return_bins), rtg_scale=small_dataset.rtg_scale,
                       dropout=0.0, lora_rank=0, freeze_mode="full")


@pytest.fixture
def toy():
    ds, _ = build_stitch_toy()
    return ds


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

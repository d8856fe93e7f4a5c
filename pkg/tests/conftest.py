"""
Pytest configuration and fixtures
"""

import os

# 64-bit engine for every test; must be set before slotpolicy is imported.
os.environ["SLOTPOLICY_PRECISION"] = "f64"

import pytest
from pathlib import Path

from slotpolicy import tensor as T
from slotpolicy.config import Config
from slotpolicy.dataset import generate_dataset
from slotpolicy.policy import PolicyConfig
from slotpolicy.rng import Stream
from slotpolicy.savi import SaviConfig
from slotpolicy.sim import SimConfig


@pytest.fixture(autouse=True)
def f64_precision():
    """Restore 64-bit precision after tests that switch it."""
    T.set_precision("f64")
    yield
    T.set_precision("f64")


@pytest.fixture
def tiny_encoder_config():
    """8x8 images, K=2 slots of width 8."""
    return SaviConfig(image_size=8, slots=2, slot_dim=8, iters_first=2, iters_later=1, clip_len=2,
                      cnn_channels=(4, 4), cnn_strides=(2, 1), predictor_depth=1, predictor_heads=2,
                      decoder_grid=4, decoder_channels=8, mlp_hidden=16)


@pytest.fixture
def tiny_policy_config():
    return PolicyConfig(history=2, trunk_dim=8, depth=1, heads=2, mixtures=2, slot_proj_dim=8)


@pytest.fixture
def tiny_sim_config():
    return SimConfig(image_size=8)


@pytest.fixture
def stream():
    return Stream(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """
    Six push demonstrations at 8x8 in two shards:

    small_dataset/
    ├── manifest.json
    ├── push-000.rshp   (4 episodes)
    └── push-001.rshp   (2 episodes)
    """
    root = tmp_path_factory.mktemp("small_dataset")
    generate_dataset(root, ["push"], level="none", episodes=6, seed=3, shard_episodes=4,
                     sim_config=SimConfig(image_size=8), workers=1)
    return root


@pytest.fixture
def tiny_config(tmp_path, small_dataset, tiny_encoder_config, tiny_policy_config, tiny_sim_config):
    """Resolved Config wired to the tiny models and the small dataset."""
    config = Config()
    config.run.out = str(tmp_path / "run")
    config.run.workers = 1
    config.data.dataset = str(small_dataset)
    config.sim = tiny_sim_config
    config.encoder = tiny_encoder_config
    config.policy = tiny_policy_config
    config.train.steps = 4
    config.train.batch_size = 2
    config.train.warmup = 2
    config.train.log_every = 2
    config.train.checkpoint_every = 0
    config.train.prefetch = False
    return config


@pytest.fixture
def slurm_environment(monkeypatch):
    """Mock SLURM environment."""
    monkeypatch.setenv('SLURM_CPUS_ON_NODE', '16')
    return 16

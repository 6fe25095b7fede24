"""Shared fixtures for the workbench tests"""

import numpy as np
import pytest

from dataset_io import synth_blobs
from vae_model import VaeArchitecture, VaeModel


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size oracle grids (run with -m slow)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_arch():
    return VaeArchitecture(input_dim=8, hidden_dims=(6,), latent_dim=2)


@pytest.fixture
def toy_model(toy_arch):
    return VaeModel.initialize(toy_arch, seed=3)


@pytest.fixture
def blobs():
    return synth_blobs(classes=3, per_class=20, dim=8, separation=0.8, seed=5)


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """No RAVEN_DATA_DIR and no stray .env in the working directory"""
    monkeypatch.delenv("RAVEN_DATA_DIR", raising=False)
    monkeypatch.chdir(tmp_path)
    return tmp_path

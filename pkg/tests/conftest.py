"""Shared fixtures for the SlotForge test suite.

Tests import the top-level modules directly, so the repository root is put
on sys.path here.
"""
import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from model import ModelConfig, init_weights  # noqa: E402
from slot_engine import EngineParams, create_engine  # noqa: E402


def make_engine(N: int = 64, L: int = 8):
    return create_engine(EngineParams(N=N, L=L), "simulator")


def toy_config(**overrides) -> ModelConfig:
    """A decoder small enough to plan and run in well under a second per step"""
    fields = dict(d=16, H=2, n_layers=2, ffn_alpha=4, N=64, L=8, n0=5, gen=3, vocab=16, seed=3)
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture
def engine():
    return make_engine()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_weights(toy_cfg):
    return init_weights(toy_cfg)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("SLOTFORGE_SEED", raising=False)


def pytest_configure(config):
    config.addinivalue_line("markers", "placement: bootstrap placement solver tests")
    config.addinivalue_line("markers", "e2e: encrypted decoding runs of the toy model")

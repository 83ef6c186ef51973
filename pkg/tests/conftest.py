"""Shared fixtures: small trained models reused across test modules."""

import pytest

from cmma.data import GlyphConfig, generate_dataset
from cmma.train import TrainConfig, train


@pytest.fixture(scope="session")
def small_glyphs():
    return generate_dataset(500, GlyphConfig(seed=3))


def _train_small(dataset, model):
    return train(dataset, TrainConfig(model=model, epochs=50, latent_dim=2, seed=0))


@pytest.fixture(scope="session")
def small_cmma(small_glyphs):
    """J = 2 CMMA trained for 50 epochs on 500 glyphs."""
    return _train_small(small_glyphs, "cmma")


@pytest.fixture(scope="session")
def small_cvae(small_glyphs):
    return _train_small(small_glyphs, "cvae")

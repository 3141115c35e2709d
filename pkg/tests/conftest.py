"""Shared fixtures: tiny geometries that keep unit tests fast."""

import numpy as np
import pytest

from shopmatch.synthdata import CorpusConfig, generate_corpus
from shopmatch.towers import TowerConfig


@pytest.fixture
def tiny_tower() -> TowerConfig:
    """Small encoder geometry; big enough that nothing degenerates."""
    return TowerConfig(image_feature_dim=7, vocab_size=30, max_tokens=6,
                       hidden_dims=(8, 6), embed_dim=5)


@pytest.fixture
def small_corpus():
    """60 products, 2 queries each, a handful of distractors."""
    config = CorpusConfig(n_products=60, n_queries_per_product=2, n_distractors=8,
                          concept_dim=4, image_feature_dim=7, vocab_size=50,
                          quant_levels=10, background_pool_size=4,
                          n_filler_tokens=6, seed=11)
    return generate_corpus(config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

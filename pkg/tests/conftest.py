import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from cevae import build_cevae_spec, init_cevae_params  # noqa: E402
from data_model import build_sem_config, generate_sem_dataset  # noqa: E402


@pytest.fixture
def repo_root() -> Path:
    return ROOT


@pytest.fixture
def tiny_cevae_spec():
    """d=3, m=5, K=2 with a fixed MMD bandwidth so losses are smooth in the parameters"""
    return build_cevae_spec(feature_dim=5, group_count=2, latent_dim=3, group_embedding_dim=2,
                            hidden_dim=4, num_hidden_layers=1, bandwidth=1.0)


@pytest.fixture
def tiny_cevae_params(tiny_cevae_spec):
    return init_cevae_params(tiny_cevae_spec, 0)


@pytest.fixture
def small_sem_samples():
    config = build_sem_config(latent_dim=2, feature_dim=5, group_count=2,
                              group_outcome_effects=[0.0, 2.0], seed=11)
    samples, truth = generate_sem_dataset(config, 240)
    return samples, truth

import os

import numpy as np
import pytest

from zsq.config import load_config
from zsq.modelio import absorb_bn_stats, build_toy_model

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "reference.toml")


@pytest.fixture(scope="session")
def reference_config():
    return load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def reference_model(reference_config):
    """The shipped reference model: 3 conv-BN-ReLU blocks, absorbed BN stats."""
    cfg = reference_config
    model = build_toy_model(cfg.model_spec, cfg.model_seed)
    return absorb_bn_stats(
        model, cfg.dataset, momentum=cfg.absorb_momentum, batch_size=cfg.absorb_batch_size
    )


@pytest.fixture(scope="session")
def eval_batches(reference_config):
    """Held-out evaluation batches from the reference config."""
    cfg = reference_config
    data = cfg.eval_dataset()
    return [
        data.batch(i * cfg.eval_batch_size, cfg.eval_batch_size)
        for i in range(cfg.eval_batches)
    ]


def rand32(shape, seed=0, scale=1.0):
    return (scale * np.random.default_rng(seed).standard_normal(shape)).astype(np.float32)

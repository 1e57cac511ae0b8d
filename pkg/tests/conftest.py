import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trajdiff.config import DiffusionConfig, ModelConfig


@pytest.fixture
def tiny_model_cfg():
    """Small widths so finite-difference sweeps stay fast."""
    return ModelConfig(
        embed_dim=4,
        time_dim=8,
        n_heads=4,
        hidden_in=(8, 8),
        hidden_time=(8, 8),
        hidden_out=(8, 8),
        ffn_mult=2,
    )


@pytest.fixture
def sc_off():
    """Self-conditioning disabled: the loss has no detached branch, so
    analytic gradients must match finite differences."""
    return DiffusionConfig(self_conditioning=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_model():
    """A small untrained model for plumbing tests."""
    from tubeseg.model import ModelConfig, TubeSegModel

    return TubeSegModel(ModelConfig(num_classes=4, num_queries=6, channels=16,
                                    embed_channels=8, num_stages=2, patch_size=4),
                        seed=9)

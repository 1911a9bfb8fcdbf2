"""
Shared fixtures
===============

Small architectures and narrow synthetic corpora keep the default run quick;
desk-scale acceptance runs carry the `slow` marker (skip with -m "not slow").
"""

import numpy as np
import pytest

from mlrep.cae_model import CAEArchitecture, TrainConfig
from mlrep.synthetic import SynthConfig, synth_generate

SMALL_WIDTHS = {'audio': 8, 'vision': 6, 'text': 16}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance runs (minutes on a laptop CPU)")


# =============================================================================
# Test Fixtures
# =============================================================================

@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_arch():
    """Reference layout with narrow channels: same kernels, padding and batchnorm placement"""
    return CAEArchitecture.reference(channels=(4, 6, 8, 3))


@pytest.fixture
def quick_train():
    return TrainConfig(batch_size=16, max_epochs=3, early_stop_patience=3, seed=0)


@pytest.fixture
def small_synth_config():
    return SynthConfig(n_utterances=120, modality_widths=dict(SMALL_WIDTHS), seed=3, name='small')


@pytest.fixture
def small_splits(small_synth_config):
    """(train, val, test) of a narrow 120-utterance sentiment corpus"""
    return synth_generate(small_synth_config)

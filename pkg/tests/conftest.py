import numpy as np
import pytest

from metasplit.data import GlyphGenConfig, split_pools, synth_glyphs


@pytest.fixture(scope="session")
def small_ds():
    """30 synthetic classes, 24 for meta-training and 6 held out."""
    return split_pools(synth_glyphs(GlyphGenConfig(num_classes=30, seed=3)), 0.2, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

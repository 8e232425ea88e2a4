import numpy as np
import pytest

from lungcad.dataio import SynthConfig, generate_synthetic_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four 648x648 synthetic slides with one cancer rectangle each."""
    out = tmp_path_factory.mktemp("synth_small")
    manifest = generate_synthetic_dataset(SynthConfig(4, 648, 648, 1, seed=7), out)
    return out, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

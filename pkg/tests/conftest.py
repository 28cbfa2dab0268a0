import numpy as np
import pytest

from sepkit import model as mdl


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """Smallest config that exercises every stage (F from W=32)."""
    base = dict(n_basis=8, heads=2, chunk=4, depth=1, units=1,
                stft_win=32, d_ff=16)
    base.update(overrides)
    return mdl.ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()

import numpy as np
import pytest

from facemark.decoder import TINY, DecoderState
from facemark.training import SyntheticFaceSpec, gen_synthetic

TINY_SPEC = SyntheticFaceSpec(num_landmarks=5, image_side=32, blob_sigma=0.05)


@pytest.fixture(scope="session")
def tiny_batch():
    return gen_synthetic(TINY_SPEC, 2, 7)


@pytest.fixture(scope="session")
def tiny_state():
    return DecoderState.init(TINY, seed=0)


def jitter_params(state, seed=99, scale=0.02):
    """Copy of the state with noise added, so zero-initialized paths carry
    real gradients during finite-difference runs."""
    rng = np.random.default_rng(seed)
    params = {k: v + rng.normal(0.0, scale, v.shape) for k, v in state.params.items()}
    return DecoderState(state.config, params)

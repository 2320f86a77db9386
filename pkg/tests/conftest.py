import numpy as np
import pytest

from segdiff.phantom import PhantomConfig, PhantomDataset
from segdiff.unet import UNetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return PhantomDataset.from_config(PhantomConfig(seed=11), 60)


@pytest.fixture
def tiny_unet_config():
    return UNetConfig.denoiser(base_channels=8, channel_multipliers=(1, 2), time_embed_dim=16, image_size=16)


def finite_difference(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` with respect to each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            up = fn(*arrays)
            arr[i] = orig - h
            down = fn(*arrays)
            arr[i] = orig
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)

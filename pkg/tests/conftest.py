import numpy as np
import pytest

from sefusion.model import BackboneConfig, FusionModelConfig, Stage
from sefusion.synthetic import lesion_image, make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Two small branches ending at 8 channels on 4x4 maps (SE ratio falls back to 8)."""
    return FusionModelConfig(
        branch_a=BackboneConfig("a", (Stage(4, 3, 2), Stage(8, 3, 2), Stage(8, 3, 1)), 3),
        branch_b=BackboneConfig("b", (Stage(8, 3, 4), Stage(8, 3, 1, residual=True), Stage(8, 3, 1, residual=True)), 3),
        se_ratio=16,
        dense1_units=32,
        dense1_dropout=0.2,
        dense2_units=32,
        dense2_dropout=0.1,
        input_size=(16, 16),
        seed=0,
    )


def separable_set(n=16, size=16, seed=0):
    """Class 1: bright square in the red channel, class 0: in the blue channel."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 0.3, (n, 3, size, size)).astype(np.float32)
    y = np.array([0, 1] * (n // 2))
    lo, hi = size // 4, 3 * size // 4
    for i in range(n):
        X[i, 0 if y[i] else 2, lo:hi, lo:hi] += 0.6
    return X, y


@pytest.fixture
def separable():
    return separable_set()


@pytest.fixture(scope="session")
def image_dataset(tmp_path_factory):
    """64 synthetic 64x64 PNGs, 32 per class."""
    return make_dataset(tmp_path_factory.mktemp("ds"), 32, 32, size=64, seed=0)


@pytest.fixture
def lesion(rng):
    return lesion_image(rng, True, 32)

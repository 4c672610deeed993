import numpy as np
import pytest

from advstream.classifier import LinearClassifier, LinearModel
from advstream.imaging import Image


def make_image(height, width, channels, seed=0):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(height, width, channels), dtype=np.uint8)
    return Image(height, width, channels, px)


def make_linear(labels=("a", "b", "c", "d"), height=4, width=4, channels=3,
                seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    m = height * width * channels
    model = LinearModel(
        labels=tuple(labels),
        height=height,
        width=width,
        channels=channels,
        weights=rng.normal(0.0, scale, size=(len(labels), m)),
        bias=rng.normal(0.0, scale, size=len(labels)),
    )
    return LinearClassifier(model)


@pytest.fixture
def small_clf():
    return make_linear()

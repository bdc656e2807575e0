import numpy as np
import pytest

from gradleak.network import NetworkSpec, conv_layer, fc_layer


def smooth_image(seed, shape=(3, 32, 32)):
    """Low-frequency random field in [0,1]; natural-image-like TV."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w),
                         indexing="ij")
    img = np.zeros(shape)
    for ch in range(c):
        for _ in range(6):
            fy, fx = rng.uniform(0.5, 3, 2)
            phase = rng.uniform(0, 2 * np.pi)
            img[ch] += rng.uniform(0.2, 1.0) * np.sin(
                2 * np.pi * (fy * yy + fx * xx) + phase)
    img -= img.min()
    img /= img.max()
    return img.ravel()


def tiny_spec(num_classes=4):
    """(2,6,6) input, one 3x3 conv to 3 channels, fc 48 -> num_classes."""
    return NetworkSpec((conv_layer(3, 2, 3), fc_layer(48, num_classes)),
                       (2, 6, 6), num_classes)


def tiny_spec_3layer(num_classes=4):
    """(2,8,8) input, two conv layers, fc."""
    return NetworkSpec(
        (conv_layer(3, 2, 3), conv_layer(3, 3, 2), fc_layer(2 * 4 * 4, num_classes)),
        (2, 8, 8), num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

"""The eight benchmark architectures (CIFAR-10 input, 10 classes).

Conv entries read (kernel width, out channels, stride, padding); every
conv layer uses Tanh and no bias, the final FC layer uses identity
activation with a nonzero bias.
"""

from __future__ import annotations

import numpy as np

from .errors import CatalogError
from .network import NetworkSpec, conv_layer, fc_layer

INPUT_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

_CONV_STACKS = {
    "cnn2_v1": [(3, 6, 1, 0)],
    "cnn2_v2": [(4, 6, 2, 0)],
    "cnn3_v1": [(3, 6, 1, 0), (4, 3, 2, 0)],
    "cnn3_v2": [(4, 6, 2, 0), (3, 3, 2, 0)],
    "cnn3_v3": [(3, 6, 1, 0), (3, 9, 1, 0)],
    "cnn3_v4": [(3, 1, 1, 0), (3, 6, 1, 0)],
    "cnn4_v1": [(3, 6, 1, 0), (4, 5, 2, 0), (4, 3, 1, 0)],
    "cnn4_v2": [(5, 16, 1, 0), (5, 6, 2, 0), (5, 32, 1, 2)],
}

# published per-layer rank deficiencies and the weighted metric, used by
# regression tests and audit sanity checks
PUBLISHED_RD = {
    "cnn2_v1": (0,),
    "cnn2_v2": (-1470,),
    "cnn3_v1": (0, -4533),
    "cnn3_v2": (-1470, -1050),
    "cnn3_v3": (0, 0),
    "cnn3_v4": (-2146, 0),
    "cnn4_v1": (0, -3965, -386),
    "cnn4_v2": (0, -9316, 0),
}
PUBLISHED_C = {
    "cnn2_v1": 0, "cnn2_v2": -1470, "cnn3_v1": -2266, "cnn3_v2": -1995,
    "cnn3_v3": 0, "cnn3_v4": -2146, "cnn4_v1": -2772, "cnn4_v2": -6211,
}


def _build(name: str) -> NetworkSpec:
    layers = []
    shape = INPUT_SHAPE
    in_ch = shape[0]
    from .network import conv_output_shape
    for k, out_ch, s, p in _CONV_STACKS[name]:
        layer = conv_layer(k, in_ch, out_ch, stride=s, padding=p)
        layers.append(layer)
        shape = conv_output_shape(layer, shape)
        in_ch = out_ch
    layers.append(fc_layer(int(np.prod(shape)), NUM_CLASSES))
    return NetworkSpec(tuple(layers), INPUT_SHAPE, NUM_CLASSES)


def catalog() -> dict:
    """Name -> NetworkSpec for all eight variants."""
    return {name: _build(name) for name in _CONV_STACKS}


def get(name: str) -> NetworkSpec:
    if name not in _CONV_STACKS:
        raise CatalogError(
            f"unknown architecture {name!r}; valid names: {', '.join(sorted(_CONV_STACKS))}")
    return _build(name)

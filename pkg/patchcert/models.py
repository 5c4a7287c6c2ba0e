"""
Architecture registry.

Networks are registered by name; every builder takes the per-example input
shape, the label count and a seeded generator, and returns a freshly
initialized Network.
"""

import re
from typing import Callable, Dict, List, Sequence

import numpy as np

from patchcert.errors import ConfigError
from patchcert.network import Affine, Conv2D, Flatten, Layer, Network, ReLU

Builder = Callable[[Sequence[int], int, np.random.Generator], List[Layer]]

SPARSE_FIRST_KERNELS = (3, 11, 13)


def _conv_stack(
    input_shape: Sequence[int],
    convs: Sequence[tuple],
    hidden: Sequence[int],
    num_labels: int,
    rng: np.random.Generator,
) -> List[Layer]:
    """convs: (out_channels, kernel, stride) triples; hidden: fc widths."""
    layers: List[Layer] = []
    channels, h, w = input_shape
    for out_channels, kernel, stride in convs:
        layers += [Conv2D(channels, out_channels, kernel, stride, rng=rng), ReLU()]
        channels = out_channels
        h, w = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    layers.append(Flatten())
    features = channels * h * w
    for width in hidden:
        layers += [Affine(features, width, rng=rng), ReLU()]
        features = width
    layers.append(Affine(features, num_labels, rng=rng))
    return layers


def _mlp255(input_shape, num_labels, rng):
    return _conv_stack(input_shape, [], [255], num_labels, rng)


def _conv_small(input_shape, num_labels, rng):
    return _conv_stack(input_shape, [(4, 4, 2), (8, 4, 2)], [256], num_labels, rng)


def _conv_4layer(input_shape, num_labels, rng):
    convs = [(4, 3, 1), (4, 4, 2), (8, 3, 1), (8, 4, 2)]
    return _conv_stack(input_shape, convs, [256, 256], num_labels, rng)


def _conv_5wide(input_shape, num_labels, rng):
    convs = [(64, 3, 1), (64, 3, 1), (128, 3, 2), (128, 3, 1), (128, 3, 1)]
    return _conv_stack(input_shape, convs, [512], num_labels, rng)


def _conv_sparse_first(kernel: int) -> Builder:
    def build(input_shape, num_labels, rng):
        return _conv_stack(input_shape, [(4, kernel, 1), (8, 4, 2)], [256], num_labels, rng)

    return build


ARCHITECTURES: Dict[str, Builder] = {
    "mlp255": _mlp255,
    "conv-small": _conv_small,
    "conv-4layer": _conv_4layer,
    "conv-5wide": _conv_5wide,
}
for _kernel in SPARSE_FIRST_KERNELS:
    ARCHITECTURES[f"conv-sparse-first-{_kernel}"] = _conv_sparse_first(_kernel)

_SPARSE_NAME = re.compile(r"^conv-sparse-first[-(](\d+)\)?$")


def canonical_name(name: str) -> str:
    """Accept ``conv-sparse-first(13)`` as an alias of ``conv-sparse-first-13``."""
    match = _SPARSE_NAME.match(name)
    if match:
        return f"conv-sparse-first-{match.group(1)}"
    return name


def build_network(
    name: str, input_shape: Sequence[int], num_labels: int = 10, seed: int = 0
) -> Network:
    """
    Build a registered architecture with Kaiming-uniform weights and zero biases.

    Raises:
        ConfigError: If the name is not registered
    """
    key = canonical_name(name)
    if key not in ARCHITECTURES:
        known = ", ".join(sorted(ARCHITECTURES))
        raise ConfigError(f"unknown architecture {name!r} (known: {known})")
    rng = np.random.default_rng(seed)
    layers = ARCHITECTURES[key](tuple(input_shape), num_labels, rng)
    return Network(layers, input_shape, num_labels, name=key)

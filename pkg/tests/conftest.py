"""
Shared fixtures: tiny networks, synthetic dataset files and a
finite-difference gradient helper.
"""

import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pytest

from patchcert.datasets import MNIST_FILES, write_cifar_batch, write_idx
from patchcert.logs import PACKAGE_LOGGER
from patchcert.network import Affine, Conv2D, Flatten, Network, ReLU
from patchcert.tensor import Tensor, use_dtype

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(autouse=True)
def reset_package_logger():
    """CLI runs attach a handler and stop propagation; undo that so caplog works."""
    yield
    logger = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


def numerical_gradient(
    build: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    weights: np.ndarray,
    h: float = 1e-6,
) -> list:
    """Central differences of sum(build(*arrays) * weights) for every input."""

    def value(values: Sequence[np.ndarray]) -> float:
        return float(np.sum(build(*[Tensor(v) for v in values]).data * weights))

    grads = []
    for position, array in enumerate(arrays):
        grad = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[position][index] += h
            minus[position][index] -= h
            grad[index] = (value(plus) - value(minus)) / (2 * h)
        grads.append(grad)
    return grads


def check_gradients(
    build: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    seed: int = 0,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> None:
    """Compare analytic and finite-difference gradients in float64."""
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with use_dtype(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*leaves)
        weights = rng.standard_normal(out.shape)
        (out * Tensor(weights)).sum().backward()
        expected = numerical_gradient(build, arrays, weights)
    for leaf, numeric in zip(leaves, expected):
        assert leaf.grad is not None
        np.testing.assert_allclose(leaf.grad, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def gradcheck():
    return check_gradients


def make_mlp(
    input_shape=(1, 6, 6), hidden: int = 8, num_labels: int = 3, seed: int = 0
) -> Network:
    rng = np.random.default_rng(seed)
    features = int(np.prod(input_shape))
    layers = [
        Flatten(),
        Affine(features, hidden, rng=rng),
        ReLU(),
        Affine(hidden, num_labels, rng=rng),
    ]
    return Network(layers, input_shape, num_labels, name="test-mlp")


def make_convnet(input_shape=(1, 6, 6), num_labels: int = 3, seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    channels, h, w = input_shape
    layers = [
        Conv2D(channels, 2, 3, 1, rng=rng),
        ReLU(),
        Flatten(),
        Affine(2 * (h - 2) * (w - 2), 5, rng=rng),
        ReLU(),
        Affine(5, num_labels, rng=rng),
    ]
    return Network(layers, input_shape, num_labels, name="test-conv")


def randomize_biases(net: Network, rng: np.random.Generator, scale: float = 0.1) -> Network:
    for layer in net.layers:
        if hasattr(layer, "bias"):
            layer.bias.data = rng.uniform(-scale, scale, layer.bias.shape).astype(np.float32)
    return net


@pytest.fixture
def mlp() -> Network:
    return make_mlp()


@pytest.fixture
def convnet() -> Network:
    return make_convnet()


@pytest.fixture
def image6(rng) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(1, 6, 6)).astype(np.float32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def write_mnist(root: Path, train: int = 16, test: int = 8, seed: int = 0) -> Path:
    """Random 28x28 digits with cycling labels, in raw IDX files."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", train), ("test", test)):
        images_name, labels_name = MNIST_FILES[split]
        write_idx(root / images_name, rng.integers(0, 256, size=(count, 28, 28)))
        write_idx(root / labels_name, np.arange(count) % 10)
    return root


def write_cifar(root: Path, per_batch: int = 3, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for offset, name in enumerate(names):
        images = rng.integers(0, 256, size=(per_batch, 3, 32, 32))
        write_cifar_batch(root / name, images, (np.arange(per_batch) + offset) % 10)
    return root


@pytest.fixture
def mnist_dir(tmp_path) -> Path:
    return write_mnist(tmp_path / "mnist-data")


@pytest.fixture
def cifar_dir(tmp_path) -> Path:
    return write_cifar(tmp_path / "cifar-data")

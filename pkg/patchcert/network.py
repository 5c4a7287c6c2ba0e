"""
Feed-forward classifier networks.

A Network is an ordered list of Affine, Conv2D, ReLU and Flatten layers
ending in an Affine layer with one output per label. Layers know how to run
on point tensors, how to describe themselves for checkpoints, and which
shape they produce; interval propagation lives in ``patchcert.interval``.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from patchcert import functional as F
from patchcert.errors import ConfigError, DimensionError
from patchcert.tensor import Parameter, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


def kaiming_uniform(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Weights drawn from U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float32)


class Layer:
    """Base layer: stateless, shape-preserving."""

    kind = "layer"

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def describe(self) -> Dict[str, Any]:
        return {"type": self.kind}

    def __repr__(self) -> str:
        fields = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "type")
        return f"{type(self).__name__}({fields})"


class Affine(Layer):
    kind = "affine"

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            kaiming_uniform((out_features, in_features), in_features, rng), name="weight"
        )
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32), name="bias")

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        return F.affine_forward(x, self.weight, self.bias)

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape != (self.in_features,):
            raise DimensionError("affine layer input", input_shape, (self.in_features,))
        return (self.out_features,)

    def describe(self) -> Dict[str, Any]:
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        rng: Optional[np.random.Generator] = None,
    ):
        if stride < 1 or kernel_size < 1:
            raise ConfigError("kernel size and stride must be positive")
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = Parameter(
            kaiming_uniform((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng),
            name="kernel",
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32), name="bias")

    def parameters(self) -> List[Parameter]:
        return [self.kernel, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d_forward(x, self.kernel, self.bias, stride=self.stride)

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise DimensionError(
                f"conv2d layer expects {self.in_channels} input channels", input_shape
            )
        _, h, w = input_shape
        k, s = self.kernel_size, self.stride
        if k > h or k > w:
            raise DimensionError("conv2d kernel larger than input", (k, k), (h, w))
        return (self.out_channels, (h - k) // s + 1, (w - k) // s + 1)

    def describe(self) -> Dict[str, Any]:
        return {
            "type": self.kind,
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel": self.kernel_size,
            "stride": self.stride,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return F.relu_forward(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        return F.reshape(x, (x.shape[0], -1))

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)


LAYER_TYPES = {cls.kind: cls for cls in (Affine, Conv2D, ReLU, Flatten)}


def layer_from_description(desc: Dict[str, Any]) -> Layer:
    """Rebuild a layer (parameters zero-initialized) from ``Layer.describe()``."""
    kind = desc.get("type")
    if kind == "affine":
        layer: Layer = Affine(int(desc["in"]), int(desc["out"]))
    elif kind == "conv2d":
        layer = Conv2D(int(desc["in"]), int(desc["out"]), int(desc["kernel"]), int(desc["stride"]))
    elif kind in LAYER_TYPES:
        layer = LAYER_TYPES[kind]()
    else:
        raise ConfigError(f"unknown layer type: {kind!r}")
    for param in layer.parameters():
        param.data = np.zeros_like(param.data)
    return layer


class Network:
    """
    Sequential classifier.

    Args:
        layers: Ordered layers; the last must be Affine with ``num_labels`` outputs
        input_shape: Per-example input shape, e.g. (1, 28, 28)
        num_labels: Number of output labels
        name: Registered architecture name, kept for reports
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        num_labels: int,
        name: str = "custom",
    ):
        self.layers = list(layers)
        self.input_shape: Shape = tuple(int(v) for v in input_shape)
        self.num_labels = int(num_labels)
        self.name = name
        self.shapes = self._check_shapes()

    def _check_shapes(self) -> List[Shape]:
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        last = self.layers[-1]
        if not isinstance(last, Affine) or last.out_features != self.num_labels:
            raise ConfigError(
                f"final layer must be affine with {self.num_labels} outputs, got {last!r}"
            )
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    @property
    def last(self) -> Affine:
        return self.layers[-1]  # type: ignore[return-value]

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def forward(self, x: Tensor, upto: Optional[int] = None) -> Tensor:
        """Run layers [0, upto) (all layers by default) on a batch."""
        x = as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise DimensionError("network input", x.shape[1:], self.input_shape)
        for layer in self.layers[:upto]:
            x = layer.forward(x)
        return x

    __call__ = forward

    def logits(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(images)).data

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_labels": self.num_labels,
            "layers": [layer.describe() for layer in self.layers],
        }

    @classmethod
    def from_description(cls, desc: Dict[str, Any]) -> "Network":
        layers = [layer_from_description(d) for d in desc["layers"]]
        return cls(layers, desc["input_shape"], desc["num_labels"], name=desc.get("name", "custom"))

    def __repr__(self) -> str:
        return f"Network({self.name}, input={self.input_shape}, layers={len(self.layers)})"

"""
Interval Bound Propagation

Elementwise lower/upper bounds pushed through a Network. Linear layers use
the center/radius form (mu' = W mu + b, r' = |W| r), monotone activations
are applied to both bounds, and the final layer is merged with the label
difference vectors so margins come out of a single bound computation.

All functions are built from differentiable tensor operations, so certified
margins can be trained through directly.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np

from patchcert import functional as F
from patchcert.errors import DimensionError, InvariantViolation, NumericError
from patchcert.network import Affine, Conv2D, Flatten, Layer, Network, ReLU
from patchcert.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

LabelSpec = Union[int, np.ndarray]


@dataclass
class IntervalTensor:
    """Paired lower/upper bound tensors of identical shape."""

    lower: Tensor
    upper: Tensor

    def __post_init__(self) -> None:
        self.lower = as_tensor(self.lower)
        self.upper = as_tensor(self.upper)
        if self.lower.shape != self.upper.shape:
            raise DimensionError("interval bounds differ in shape", self.lower.shape, self.upper.shape)

    @classmethod
    def point(cls, x: Union[Tensor, np.ndarray]) -> "IntervalTensor":
        x = as_tensor(x)
        return cls(x, x)

    @property
    def shape(self):
        return self.lower.shape

    @property
    def center(self) -> Tensor:
        return (self.upper + self.lower) * 0.5

    @property
    def radius(self) -> Tensor:
        return (self.upper - self.lower) * 0.5

    def check_ordered(self) -> None:
        if np.any(self.lower.data > self.upper.data):
            worst = float(np.max(self.lower.data - self.upper.data))
            raise InvariantViolation(f"interval lower bound exceeds upper bound by {worst}")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lower.data)) and np.all(np.isfinite(self.upper.data)))

    def contains(self, points: np.ndarray, slack: float = 0.0) -> bool:
        return bool(
            np.all(points >= self.lower.data - slack) and np.all(points <= self.upper.data + slack)
        )

    def reshape(self, *shape: int) -> "IntervalTensor":
        return IntervalTensor(self.lower.reshape(*shape), self.upper.reshape(*shape))

    def take(self, indices: np.ndarray, axis: int = 0) -> "IntervalTensor":
        return IntervalTensor(F.take(self.lower, indices, axis), F.take(self.upper, indices, axis))


def _linear_image(
    z: IntervalTensor,
    center_map: Callable[[Tensor], Tensor],
    radius_map: Callable[[Tensor], Tensor],
) -> IntervalTensor:
    z.check_ordered()
    mu = center_map(z.center)
    r = radius_map(z.radius)
    return IntervalTensor(mu - r, mu + r)


def propagate_affine(z: IntervalTensor, w: Tensor, b: Optional[Tensor] = None) -> IntervalTensor:
    """
    Interval image of an affine map.

    Bounds are exact per coordinate: each is attained at a vertex of the box.

    Raises:
        InvariantViolation: If the input has lower > upper anywhere
    """
    abs_w = F.abs_(w)
    return _linear_image(
        z,
        lambda mu: F.affine_forward(mu, w, b),
        lambda r: F.affine_forward(r, abs_w),
    )


def propagate_conv(
    z: IntervalTensor, kernel: Tensor, b: Optional[Tensor] = None, stride: int = 1
) -> IntervalTensor:
    """Interval image of a convolution: radii are convolved with |kernel|."""
    abs_k = F.abs_(kernel)
    return _linear_image(
        z,
        lambda mu: F.conv2d_forward(mu, kernel, b, stride=stride),
        lambda r: F.conv2d_forward(r, abs_k, stride=stride),
    )


def propagate_monotone(
    z: IntervalTensor, activation: Callable[[Tensor], Tensor] = F.relu_forward
) -> IntervalTensor:
    """Apply a nondecreasing elementwise activation to both bounds."""
    return IntervalTensor(activation(z.lower), activation(z.upper))


def propagate_layer(z: IntervalTensor, layer: Layer) -> IntervalTensor:
    if isinstance(layer, Affine):
        return propagate_affine(z, layer.weight, layer.bias)
    if isinstance(layer, Conv2D):
        return propagate_conv(z, layer.kernel, layer.bias, stride=layer.stride)
    if isinstance(layer, ReLU):
        return propagate_monotone(z)
    if isinstance(layer, Flatten):
        return z.reshape(z.shape[0], -1)
    raise TypeError(f"no interval rule for {layer!r}")


def propagate_network(
    z0: IntervalTensor,
    net: Network,
    start: int = 0,
    stop: Optional[int] = None,
    hooks: Optional[Dict[int, Callable[[IntervalTensor], IntervalTensor]]] = None,
) -> IntervalTensor:
    """
    Push an input box through layers [start, stop) of ``net``.

    Args:
        z0: Batched input interval, shape [N, ...] matching the layer input
        net: Network to propagate through
        start: First layer index
        stop: One past the last layer index (defaults to all layers)
        hooks: Callables applied to the interval right after the layer with
            the matching index (used for bound pooling)

    Raises:
        NumericError: If a propagated bound is NaN or infinite
    """
    hooks = hooks or {}
    if start == 0 and z0.shape[1:] != net.input_shape:
        raise DimensionError("interval input does not match network", z0.shape[1:], net.input_shape)
    stop = len(net.layers) if stop is None else stop
    z = z0
    for index in range(start, stop):
        z = propagate_layer(z, net.layers[index])
        if index in hooks:
            z = hooks[index](z)
        if not z.is_finite():
            raise NumericError("non-finite interval bound", layer_index=index)
    return z


def _labels_for(y_true: LabelSpec, rows: int, num_labels: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
    if labels.size == 1 and rows != 1:
        labels = np.full(rows, labels[0], dtype=np.int64)
    if labels.shape != (rows,):
        raise DimensionError("one true label per interval row required", labels.shape, (rows,))
    if np.any(labels < 0) or np.any(labels >= num_labels):
        raise IndexError(f"true label out of range [0, {num_labels})")
    return labels


def margin_lower_bounds(z_pen: IntervalTensor, last: Affine, y_true: LabelSpec) -> Tensor:
    """
    Certified lower bounds on logit(y_true) - logit(y) for every label y.

    The final affine layer is merged with (e_{y_true} - e_y): each label gets
    the row W[y_true] - W[y] and bias b[y_true] - b[y], bounded with the
    affine interval rule. The y_true column is exactly zero.

    Args:
        z_pen: Interval entering the final affine layer, shape [N, in]
        last: The network's final affine layer
        y_true: One label for all rows, or one label per row

    Returns:
        Tensor of shape [N, labels]

    Raises:
        IndexError: If a label is out of range
    """
    rows = z_pen.shape[0]
    labels = _labels_for(y_true, rows, last.out_features)
    mu, r = z_pen.center, z_pen.radius

    pieces = []
    order = []
    for label in np.unique(labels):
        idx = np.nonzero(labels == label)[0]
        merged_w = F.take(last.weight, np.array([label]), axis=0) - last.weight
        merged_b = F.take(last.bias, np.array([label]), axis=0) - last.bias
        if idx.size == rows:
            mu_sel, r_sel = mu, r
        else:
            mu_sel, r_sel = F.take(mu, idx, axis=0), F.take(r, idx, axis=0)
        center = F.affine_forward(mu_sel, merged_w, merged_b)
        radius = F.affine_forward(r_sel, F.abs_(merged_w))
        pieces.append(center - radius)
        order.append(idx)

    if len(pieces) == 1:
        return pieces[0]
    inverse = np.argsort(np.concatenate(order), kind="stable")
    return F.take(F.concat(pieces, axis=0), inverse, axis=0)


def unmerged_margin_lower_bounds(z_out: IntervalTensor, y_true: LabelSpec) -> Tensor:
    """Margins from output bounds alone: lower[y_true] - upper[y]."""
    rows, num_labels = z_out.shape
    labels = _labels_for(y_true, rows, num_labels)
    lower_true = z_out.lower.data[np.arange(rows), labels][:, None]
    margins = lower_true - z_out.upper.data
    margins[np.arange(rows), labels] = 0.0
    return Tensor(margins)


def network_margins(net: Network, z0: IntervalTensor, y_true: LabelSpec, **kwargs) -> Tensor:
    """Propagate to the penultimate interval, then apply the merged margin bound."""
    z_pen = propagate_network(z0, net, stop=len(net.layers) - 1, **kwargs)
    return margin_lower_bounds(z_pen, net.last, y_true)


@dataclass
class MarginVector:
    """Per-label certified margins for one example; the true-label entry is 0."""

    values: np.ndarray
    true_label: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not 0 <= self.true_label < self.values.size:
            raise IndexError(f"true label {self.true_label} out of range")
        if self.values[self.true_label] != 0:
            raise InvariantViolation("margin at the true label must be exactly 0")

    @property
    def minimum(self) -> float:
        return float(self.values.min())

    def __len__(self) -> int:
        return self.values.size


def is_certified(margins: Union[MarginVector, np.ndarray, Tensor]) -> bool:
    """True iff every margin is nonnegative."""
    if isinstance(margins, MarginVector):
        values = margins.values
    elif isinstance(margins, Tensor):
        values = margins.data
    else:
        values = np.asarray(margins)
    return bool(np.all(values >= 0))

"""
Certifier

Certificates for single images and certified accuracy over datasets.

Patch certificates sweep every placement of the mask: each batch of
placements becomes a batch of input boxes, margins are bounded with the
merged last layer, and per-label running minima are reduced across batches.
Sparse certificates replace the first layer with the top-k bound.
"""

import functools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from patchcert import functional as F
from patchcert.errors import ConfigError
from patchcert.interval import (
    MarginVector,
    is_certified,
    margin_lower_bounds,
    network_margins,
    propagate_network,
)
from patchcert.network import Affine, Conv2D, Flatten, Network
from patchcert.tensor import Tensor, no_grad
from patchcert.threats import (
    PatchPlacement,
    PlacementGrid,
    ShapeMask,
    ThreatModel,
    patch_input_intervals,
    sparse_first_layer_bounds,
)

logger = logging.getLogger(__name__)

DEFAULT_PLACEMENT_BATCH = 256


@dataclass
class CertResult:
    """
    Outcome of certifying one image.

    ``worst_placements[y]`` is the placement attaining the minimum margin for
    label y (None for the true label and for sparse certificates).
    ``partial`` marks sweeps that stopped early; their margins are upper
    bounds on the exact worst margins but the verdict is final.
    """

    certified: bool
    margins: MarginVector
    worst_placements: List[Optional[PatchPlacement]]
    elapsed: float
    partial: bool = False
    margin_map: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def min_margin(self) -> float:
        values = np.delete(self.margins.values, self.margins.true_label)
        return float(values.min()) if values.size else 0.0

    @property
    def worst_label(self) -> Optional[int]:
        values = self.margins.values.copy()
        if values.size < 2:
            return None
        values[self.margins.true_label] = np.inf
        return int(values.argmin())

    @property
    def worst_anchor(self) -> Optional[Tuple[int, int]]:
        label = self.worst_label
        if label is None or self.worst_placements[label] is None:
            return None
        return self.worst_placements[label].anchor  # type: ignore[union-attr]


@functools.lru_cache(maxsize=32)
def placement_grid(mask: ShapeMask, image_dims: Tuple[int, int]) -> PlacementGrid:
    """Shared, cached placement grid for a mask and image size."""
    return PlacementGrid(mask, image_dims)


def _finish(
    net: Network,
    y_true: int,
    worst: np.ndarray,
    worst_placements: List[Optional[PatchPlacement]],
    started: float,
    partial: bool = False,
    margin_map: Optional[np.ndarray] = None,
) -> CertResult:
    worst = worst.astype(np.float32)
    worst[y_true] = 0.0
    margins = MarginVector(worst, y_true)
    return CertResult(
        certified=is_certified(margins),
        margins=margins,
        worst_placements=worst_placements,
        elapsed=time.perf_counter() - started,
        partial=partial,
        margin_map=margin_map,
    )


def certify_patch(
    net: Network,
    image: np.ndarray,
    y_true: int,
    threat: ThreatModel,
    placements: Optional[Sequence[PatchPlacement]] = None,
    batch_size: int = DEFAULT_PLACEMENT_BATCH,
    early_exit: bool = False,
    full_map: bool = False,
) -> CertResult:
    """
    Certify one image against a patch threat by sweeping placements.

    Args:
        net: Classifier
        image: [C, H, W] image in the threat's intensity range
        y_true: True label
        threat: Patch threat (mask, intensity range, eps scale)
        placements: Placement subset to sweep; all placements of the mask by default
        batch_size: Placements propagated together
        early_exit: Stop once every non-true label has a negative running minimum
        full_map: Keep the [P, labels] margin map (disables early exit)

    Returns:
        CertResult with per-label worst margins and their placements
    """
    if threat.kind != "patch" or threat.mask is None:
        raise ConfigError("certify_patch needs a patch threat")
    if net.num_labels < 2:
        raise ConfigError("certification needs at least two labels")
    started = time.perf_counter()
    image = np.asarray(image, dtype=np.float32)
    dims = (image.shape[1], image.shape[2])

    if placements is None:
        grid = placement_grid(threat.mask, dims)
        chosen: List[PatchPlacement] = grid.placements
        masks = grid.masks
    else:
        chosen = list(placements)
        if not chosen:
            raise ConfigError("at least one placement is required")
        masks = np.stack([p.pixel_mask(dims) for p in chosen])

    labels = net.num_labels
    worst = np.full(labels, np.inf, dtype=np.float64)
    worst_index = np.zeros(labels, dtype=np.int64)
    others = np.arange(labels) != y_true
    rows: List[np.ndarray] = []
    partial = False

    with no_grad():
        for offset in range(0, len(chosen), batch_size):
            box = patch_input_intervals(
                image[None],
                masks[offset : offset + batch_size],
                threat.intensity_range,
                threat.eps_scale,
            )
            margins = network_margins(net, box, y_true).data
            if full_map:
                rows.append(margins)
            batch_min = margins.min(axis=0)
            improved = batch_min < worst
            worst_index[improved] = margins.argmin(axis=0)[improved] + offset
            worst[improved] = batch_min[improved]
            remaining = len(chosen) - offset - margins.shape[0]
            if early_exit and not full_map and remaining > 0 and np.all(worst[others] < 0):
                partial = True
                logger.debug("early exit after %d placements", offset + margins.shape[0])
                break

    worst_placements: List[Optional[PatchPlacement]] = [
        None if y == y_true else chosen[int(worst_index[y])] for y in range(labels)
    ]
    margin_map = np.concatenate(rows, axis=0) if full_map else None
    return _finish(net, y_true, worst, worst_placements, started, partial, margin_map)


def _first_linear_layer(net: Network) -> int:
    for index, layer in enumerate(net.layers):
        if isinstance(layer, (Affine, Conv2D)):
            return index
        if not isinstance(layer, Flatten):
            break
    raise ConfigError("sparse certificates need an affine or convolution first layer")


def _merged_last_layer(last: Affine, y_true: int) -> Affine:
    """An affine layer whose rows are W[y_true] - W[y] (bias likewise)."""
    merged = Affine(last.in_features, last.out_features)
    merged.weight = F.take(last.weight, np.array([y_true]), axis=0) - last.weight  # type: ignore
    merged.bias = F.take(last.bias, np.array([y_true]), axis=0) - last.bias  # type: ignore
    return merged


def sparse_margins(
    net: Network, images: np.ndarray, y_true, k: int, eps_scale: float = 1.0
) -> Tensor:
    """
    Differentiable margin lower bounds under a k-pixel sparse adversary.

    Args:
        images: [N, C, H, W]
        y_true: One label or one per image
    """
    first = _first_linear_layer(net)
    channels = net.input_shape[0]
    x = Tensor(np.asarray(images, dtype=np.float32))
    layer = net.layers[first]
    last_index = len(net.layers) - 1
    if first == last_index:
        # The sparse layer is the output layer: bound the merged rows directly
        labels = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
        if labels.size == 1:
            merged = _merged_last_layer(net.last, int(labels[0]))
            return sparse_first_layer_bounds(x, merged, k, channels, eps_scale).lower
        raise ConfigError("single-layer sparse margins take one label at a time")
    z1 = sparse_first_layer_bounds(x, layer, k, channels, eps_scale)
    z_pen = propagate_network(z1, net, start=first + 1, stop=last_index)
    return margin_lower_bounds(z_pen, net.last, y_true)


def certify_sparse(net: Network, image: np.ndarray, y_true: int, k: int) -> CertResult:
    """
    Certify one image against any modification of at most k pixels.

    Raises:
        ConfigError: If the network does not start with an affine or
            convolution layer, or k exceeds the pixel count
    """
    started = time.perf_counter()
    with no_grad():
        margins = sparse_margins(net, np.asarray(image)[None], y_true, k).data[0]
    return _finish(
        net, y_true, margins.astype(np.float64), [None] * net.num_labels, started
    )


def certify(net: Network, image: np.ndarray, y_true: int, threat: ThreatModel, **kwargs) -> CertResult:
    """Dispatch on the threat kind."""
    if threat.kind == "sparse":
        return certify_sparse(net, image, y_true, threat.k)
    return certify_patch(net, image, y_true, threat, **kwargs)


@dataclass
class AccuracySummary:
    """Dataset-level clean and certified accuracy."""

    count: int
    clean_correct: int
    certified_correct: int
    elapsed: float
    results: List[CertResult] = field(default_factory=list, repr=False)

    @property
    def clean_accuracy(self) -> float:
        return self.clean_correct / self.count if self.count else 0.0

    @property
    def certified_accuracy(self) -> float:
        return self.certified_correct / self.count if self.count else 0.0


def cert_record(index: int, label: int, predicted: int, result: CertResult) -> Dict:
    """One report line for a certified image."""
    anchor = result.worst_anchor
    return {
        "index": index,
        "label": label,
        "predicted": predicted,
        "certified": bool(result.certified and predicted == label),
        "min_margin": result.min_margin,
        "argmin_anchor": list(anchor) if anchor is not None else None,
        "partial": result.partial,
        "elapsed": round(result.elapsed, 6),
    }


def certified_accuracy(
    net: Network,
    dataset,
    threat: ThreatModel,
    on_result: Optional[Callable[[Dict], None]] = None,
    keep_results: bool = False,
    progress: Optional[Callable[[int], None]] = None,
    **kwargs,
) -> AccuracySummary:
    """
    Fraction of images that are both correctly classified and certified.

    Args:
        net: Classifier
        dataset: Object with ``images`` [N, C, H, W] and ``labels`` [N]
        threat: Patch or sparse threat
        on_result: Receives one report record per image, in order
        keep_results: Keep every CertResult on the summary
        progress: Called with the number of images done
        **kwargs: Forwarded to ``certify_patch`` (batch_size, early_exit)

    Raises:
        ConfigError: If the dataset is empty
    """
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ConfigError("certified accuracy needs a nonempty dataset")
    started = time.perf_counter()
    predictions = net.predict(images)
    summary = AccuracySummary(len(labels), 0, 0, 0.0)

    for index, (image, label, predicted) in enumerate(zip(images, labels, predictions)):
        label, predicted = int(label), int(predicted)
        result = certify(net, image, label, threat, **kwargs)
        correct = predicted == label
        summary.clean_correct += int(correct)
        summary.certified_correct += int(correct and result.certified)
        if keep_results:
            summary.results.append(result)
        if on_result is not None:
            on_result(cert_record(index, label, predicted, result))
        if progress is not None:
            progress(index + 1)

    summary.elapsed = time.perf_counter() - started
    logger.info(
        "%s: clean %.4f, certified %.4f over %d images",
        threat.description,
        summary.clean_accuracy,
        summary.certified_accuracy,
        summary.count,
    )
    return summary

"""
Certified Training

Trains a classifier on cross-entropy over negated certified margins. The
margin vector of each image is the worst case over a set of patch
placements chosen by the strategy:

- all: every placement;
- random: ``count`` placements drawn uniformly for each image;
- guided: ``count`` placements sampled from a margin predictor's output,
  which is itself trained on the margins it selected;
- pooled: every placement, with intervals of adjacent placements merged at
  intermediate layers.

Sparse training replaces the placement sweep with the top-k first-layer bound.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from patchcert import functional as F
from patchcert.certifier import certified_accuracy, placement_grid, sparse_margins
from patchcert.errors import ConfigError, NumericError, TrainingDivergedError
from patchcert.interval import IntervalTensor, margin_lower_bounds, propagate_network
from patchcert.network import Network, ReLU
from patchcert.optim import Adam
from patchcert.predictor import MarginPredictor
from patchcert.schedule import epsilon_schedule, learning_rate
from patchcert.tensor import Tensor
from patchcert.threats import (
    DEFAULT_RANGE,
    PlacementGrid,
    ShapeMask,
    ThreatModel,
    make_shape,
    patch_input_intervals,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("all", "random", "guided", "pooled")

PoolStage = Tuple[int, int, int]


@dataclass
class TrainConfig:
    """
    Hyperparameters for one training run.

    ``pool_stages`` holds (layer index, group rows, group cols) triples: after
    the layer with that index, intervals of each block of adjacent placements
    are merged. ``sparse_k`` > 0 switches to sparse training and ignores the
    strategy.
    """

    strategy: str = "all"
    count: int = 10
    shape: str = "square"
    patch_size: int = 2
    pixels: Optional[int] = None
    pool_stages: List[PoolStage] = field(default_factory=list)
    sparse_k: int = 0
    epochs: int = 100
    warmup: int = 61
    lr: float = 5e-4
    lr_halving_period: int = 10
    batch_size: int = 128
    seed: int = 0
    temperature: float = 1.0
    predictor_lr: float = 1e-3
    eval_size: int = 100
    eval_every: int = 10
    intensity_range: Tuple[float, float] = DEFAULT_RANGE

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r} (expected one of {STRATEGIES})")
        if self.count < 1:
            raise ConfigError(f"patch count must be at least 1, got {self.count}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup <= self.epochs:
            raise ConfigError(f"warm-up must be in [0, epochs], got {self.warmup}")
        if self.lr <= 0 or self.predictor_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.sparse_k < 0:
            raise ConfigError(f"sparse k must be nonnegative, got {self.sparse_k}")
        if self.strategy == "pooled" and not self.pool_stages and not self.sparse_k:
            raise ConfigError("pooled training needs at least one pooling stage")
        for stage in self.pool_stages:
            if len(stage) != 3 or min(stage[1:]) < 1:
                raise ConfigError(f"bad pooling stage {stage!r}")
        make_shape(self.shape, self.pixel_count)

    @property
    def pixel_count(self) -> int:
        return self.pixels if self.pixels is not None else self.patch_size**2

    @property
    def mask(self) -> ShapeMask:
        return make_shape(self.shape, self.pixel_count)

    def threat(self, eps_scale: float = 1.0) -> ThreatModel:
        if self.sparse_k:
            return ThreatModel(
                kind="sparse", k=self.sparse_k, intensity_range=self.intensity_range
            )
        return ThreatModel(
            mask=self.mask, intensity_range=self.intensity_range, eps_scale=eps_scale
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["pool_stages"] = [list(stage) for stage in self.pool_stages]
        data["intensity_range"] = list(self.intensity_range)
        return data


@dataclass
class EpochMetrics:
    epoch: int
    eps: float
    lr: float
    loss: float
    clean_acc: float
    cert_acc_sample: Optional[float]
    seconds: float
    predictor_loss: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    net: Network
    predictor: Optional[MarginPredictor]
    history: List[EpochMetrics]


# ----------------------------------------------------------------------
# Losses and margin sweeps
# ----------------------------------------------------------------------


def certificate_loss(margins: Tensor, y_true) -> Tensor:
    """Softmax cross-entropy of the negated margins against the true labels."""
    return F.softmax_cross_entropy(-margins, y_true)


def placement_margins(
    net: Network,
    images: np.ndarray,
    y_true: np.ndarray,
    masks: np.ndarray,
    eps_scale: float = 1.0,
    intensity_range: Tuple[float, float] = DEFAULT_RANGE,
    hooks: Optional[Dict[int, Callable[[IntervalTensor], IntervalTensor]]] = None,
) -> Tensor:
    """
    Merged margin lower bounds for every (image, placement) pair.

    Args:
        images: [B, C, H, W]
        y_true: [B] labels
        masks: [P, H, W] shared or [B, P, H, W] per image
        hooks: Interval hooks (pooling); they may shrink the per-image row count

    Returns:
        Tensor [B, R, labels] where R is P, or the pooled group count
    """
    images = np.asarray(images, dtype=np.float32)
    batch = images.shape[0]
    box = patch_input_intervals(images, masks, intensity_range, eps_scale)
    z_pen = propagate_network(box, net, stop=len(net.layers) - 1, hooks=hooks)
    rows = z_pen.shape[0] // batch
    labels = np.repeat(np.asarray(y_true, dtype=np.int64), rows)
    margins = margin_lower_bounds(z_pen, net.last, labels)
    return margins.reshape(batch, rows, net.num_labels)


def margins_all_patches(
    net: Network,
    images: np.ndarray,
    y_true: np.ndarray,
    masks: np.ndarray,
    eps_scale: float = 1.0,
    intensity_range: Tuple[float, float] = DEFAULT_RANGE,
    hooks: Optional[Dict[int, Callable[[IntervalTensor], IntervalTensor]]] = None,
) -> Tensor:
    """
    Worst-case margins over a placement set, [B, labels].

    The minimum routes its gradient to the first placement attaining it.
    """
    per_placement = placement_margins(
        net, images, y_true, masks, eps_scale, intensity_range, hooks
    )
    return F.amin(per_placement, axis=1)


# ----------------------------------------------------------------------
# Placement selection
# ----------------------------------------------------------------------


def sample_random_patches(
    placements: Sequence, count: int, rng: np.random.Generator, images: Optional[int] = None
) -> np.ndarray:
    """
    Indices of ``count`` placements drawn uniformly without replacement.

    With ``images`` every image gets its own draw and the result is
    [images, count]; otherwise one draw of shape [count] is shared.
    A count above the number of placements is clamped (with a warning).
    """
    total = len(placements)
    if count < 1:
        raise ConfigError(f"patch count must be at least 1, got {count}")
    if count > total:
        logger.warning("patch count %d exceeds %d placements; using all of them", count, total)
        count = total
    if images is None:
        return rng.choice(total, size=count, replace=False)
    return np.stack([rng.choice(total, size=count, replace=False) for _ in range(images)])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def guided_probabilities(predicted: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """
    Per-label sampling weights over the placement grid.

    Args:
        predicted: [labels, rows, cols] predicted margins for one image

    Returns:
        [labels, rows * cols]; rows sum to 1. Non-finite rows are uniform.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    flat = np.asarray(predicted, dtype=np.float64).reshape(predicted.shape[0], -1)
    probs = np.empty_like(flat)
    for label, row in enumerate(flat):
        if np.all(np.isfinite(row)):
            probs[label] = _softmax(-row / temperature)
        else:
            logger.warning("non-finite margin prediction for label %d; sampling uniformly", label)
            probs[label] = 1.0 / row.size
    return probs


def guided_select(
    predicted: np.ndarray,
    rng: np.random.Generator,
    temperature: float = 1.0,
    count: Optional[int] = None,
) -> np.ndarray:
    """
    Sample placements from predicted margins, low margins most likely.

    Draw i uses label i mod labels; ``count`` defaults to one per label.
    Duplicate placements are dropped, first occurrence kept.

    Returns:
        Flat row-major placement indices
    """
    probs = guided_probabilities(predicted, temperature)
    labels, cells = probs.shape
    count = labels if count is None else count
    draws = [int(rng.choice(cells, p=probs[i % labels])) for i in range(count)]
    return np.asarray(list(dict.fromkeys(draws)), dtype=np.int64)


def predictor_loss(
    predicted: Tensor, selected: np.ndarray, actual: np.ndarray
) -> Tensor:
    """
    Mean squared error between predicted and actual margins at selected placements.

    Args:
        predicted: [B, labels, rows, cols]
        selected: [B, S] flat placement indices (repeats allowed)
        actual: [B, S, labels] margins computed for those placements

    Every label entry of a selected placement counts once; all other grid
    entries are ignored.
    """
    batch, labels = predicted.shape[:2]
    flat = predicted.reshape(batch, labels, -1)
    cells = flat.shape[2]
    target = np.zeros((batch, labels, cells), dtype=np.float64)
    weight = np.zeros((batch, labels, cells), dtype=np.float64)
    for b in range(batch):
        for s, index in enumerate(selected[b]):
            target[b, :, index] = actual[b, s]
            weight[b, :, index] = 1.0
    diff = flat - Tensor(target)
    squared = diff * diff * Tensor(weight)
    return F.sum_(squared) * (1.0 / weight.sum())


def predictor_update(
    predictor: MarginPredictor,
    optimizer: Adam,
    images: np.ndarray,
    selected: np.ndarray,
    actual: np.ndarray,
) -> float:
    """One Adam step on the predictor only; returns the masked MSE."""
    predictor.zero_grad()
    loss = predictor_loss(predictor(Tensor(images)), selected, actual)
    loss.backward()
    optimizer.step()
    return loss.item()


# ----------------------------------------------------------------------
# Bound pooling
# ----------------------------------------------------------------------


def grid_groups(rows: int, cols: int, group_rows: int, group_cols: int) -> List[List[int]]:
    """Blocks of adjacent row-major grid cells; edge blocks may be smaller."""
    if group_rows < 1 or group_cols < 1:
        raise ConfigError("pooling groups must be at least 1x1")
    groups = []
    for top in range(0, rows, group_rows):
        for left in range(0, cols, group_cols):
            groups.append(
                [
                    r * cols + c
                    for r in range(top, min(top + group_rows, rows))
                    for c in range(left, min(left + group_cols, cols))
                ]
            )
    return groups


def pool_bounds(z: IntervalTensor, groups: Sequence[Sequence[int]], batch: int) -> IntervalTensor:
    """
    Merge the intervals of each placement group into one interval.

    Args:
        z: Per-placement intervals, [batch * P, ...] image-major
        groups: Partition of range(P)
        batch: Number of images

    Returns:
        [batch * len(groups), ...] with lower = min and upper = max over each group

    Raises:
        ConfigError: If the groups do not partition the placements
    """
    placements = z.shape[0] // batch
    members = sorted(i for group in groups for i in group)
    if not groups or any(not g for g in groups) or members != list(range(placements)):
        raise ConfigError(f"pooling groups must partition {placements} placements")
    width = max(len(g) for g in groups)
    # Short groups repeat their first member; min/max ignore the repeats
    padded = np.array([list(g) + [g[0]] * (width - len(g)) for g in groups], dtype=np.int64)
    offsets = np.arange(batch, dtype=np.int64)[:, None, None] * placements
    index = (offsets + padded[None]).reshape(-1)

    tail = z.shape[1:]
    shape = (batch * len(groups), width) + tail
    lower = F.amin(F.reshape(F.take(z.lower, index, axis=0), shape), axis=1)
    upper = F.amax(F.reshape(F.take(z.upper, index, axis=0), shape), axis=1)
    return IntervalTensor(lower, upper)


def pooling_hooks(
    net: Network, stages: Sequence[PoolStage], grid_shape: Tuple[int, int], batch: int
) -> Dict[int, Callable[[IntervalTensor], IntervalTensor]]:
    """
    Interval hooks applying each pooling stage after its layer.

    Later stages pool the grid left by earlier ones.
    """
    hooks: Dict[int, Callable[[IntervalTensor], IntervalTensor]] = {}
    rows, cols = grid_shape
    last_layer = -1
    for layer, group_rows, group_cols in sorted(stages):
        if not 0 <= layer < len(net.layers) - 1 or layer == last_layer:
            raise ConfigError(f"cannot pool after layer {layer}")
        groups = grid_groups(rows, cols, group_rows, group_cols)
        hooks[layer] = lambda z, g=groups: pool_bounds(z, g, batch)
        rows, cols = math.ceil(rows / group_rows), math.ceil(cols / group_cols)
        last_layer = layer
    return hooks


def activation_layers(net: Network) -> List[int]:
    """Indices of the ReLU layers, in order."""
    return [i for i, layer in enumerate(net.layers) if isinstance(layer, ReLU)]


def stages_from_groups(net: Network, groups: Sequence[Tuple[int, int]]) -> List[PoolStage]:
    """Place the n-th pooling group after the n-th activation layer."""
    activations = activation_layers(net)
    if len(groups) > len(activations):
        raise ConfigError(
            f"{len(groups)} pooling stages but only {len(activations)} activation layers"
        )
    return [(activations[i], gr, gc) for i, (gr, gc) in enumerate(groups)]


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------


class Trainer:
    """
    Runs certified training of ``net`` on ``dataset`` under ``config``.

    Args:
        net: Classifier, updated in place
        dataset: Training data
        config: Validated TrainConfig
        eval_set: Held-out slice for per-epoch accuracy (defaults to the
            first ``eval_size`` training images)
        predictor: Margin predictor for guided training (built if missing)
    """

    def __init__(
        self,
        net: Network,
        dataset,
        config: TrainConfig,
        eval_set=None,
        predictor: Optional[MarginPredictor] = None,
    ):
        config.validate()
        self.net = net
        self.dataset = dataset
        self.config = config
        self.eval_set = eval_set if eval_set is not None else dataset.take(config.eval_size)
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = Adam(net.parameters(), lr=config.lr)
        self.sparse = config.sparse_k > 0

        self.grid: Optional[PlacementGrid] = None
        if not self.sparse:
            self.grid = placement_grid(config.mask, tuple(net.input_shape[1:]))

        self.predictor = predictor
        self.predictor_optimizer: Optional[Adam] = None
        if config.strategy == "guided" and not self.sparse:
            assert self.grid is not None
            if self.predictor is None:
                self.predictor = MarginPredictor(
                    net.input_shape,
                    net.num_labels,
                    (self.grid.rows, self.grid.cols),
                    seed=config.seed,
                )
            self.predictor_optimizer = Adam(self.predictor.parameters(), lr=config.predictor_lr)
        self._pending_predictor_batch: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    def batch_margins(self, images: np.ndarray, labels: np.ndarray, eps: float) -> Tensor:
        """Margins for one batch under the configured strategy."""
        config, grid = self.config, self.grid
        if self.sparse:
            return sparse_margins(self.net, images, labels, config.sparse_k, eps)
        assert grid is not None
        if eps == 0.0:
            # The box collapses to the clean image for every placement
            return margins_all_patches(self.net, images, labels, grid.masks[:1], 0.0)

        run = lambda masks, hooks=None: margins_all_patches(  # noqa: E731
            self.net, images, labels, masks, eps, config.intensity_range, hooks
        )
        if config.strategy == "all":
            return run(grid.masks)
        if config.strategy == "pooled":
            hooks = pooling_hooks(
                self.net, config.pool_stages, (grid.rows, grid.cols), len(images)
            )
            return run(grid.masks, hooks)
        if config.strategy == "random":
            chosen = sample_random_patches(grid.placements, config.count, self.rng, len(images))
            return run(grid.masks[chosen])
        return self._guided_margins(images, labels, eps)

    def _guided_margins(self, images: np.ndarray, labels: np.ndarray, eps: float) -> Tensor:
        assert self.predictor is not None and self.grid is not None
        config = self.config
        predicted = self.predictor.predict(images)
        picks = [
            guided_select(p, self.rng, config.temperature, config.count) for p in predicted
        ]
        width = max(len(p) for p in picks)
        selected = np.array([np.resize(p, width) for p in picks], dtype=np.int64)
        masks = self.grid.masks[selected]
        per_placement = placement_margins(
            self.net, images, labels, masks, eps, config.intensity_range
        )
        self._pending_predictor_batch = (images, selected, per_placement.data.copy())
        return F.amin(per_placement, axis=1)

    def _update_predictor(self) -> Optional[float]:
        pending = self._pending_predictor_batch
        if pending is None or self.predictor is None or self.predictor_optimizer is None:
            return None
        self._pending_predictor_batch = None
        return predictor_update(self.predictor, self.predictor_optimizer, *pending)

    def evaluate(self, certify: bool) -> Tuple[float, Optional[float]]:
        """Clean accuracy on the held-out slice, plus certified accuracy if asked."""
        predictions = self.net.predict(self.eval_set.images)
        clean = float(np.mean(predictions == self.eval_set.labels))
        if not certify:
            return clean, None
        summary = certified_accuracy(
            self.net, self.eval_set, self.config.threat(), early_exit=True
        )
        return clean, summary.certified_accuracy

    def run(self, on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
        config = self.config
        count = len(self.dataset)
        batches = math.ceil(count / config.batch_size)
        history: List[EpochMetrics] = []

        for epoch in range(config.epochs):
            started = time.perf_counter()
            lr = learning_rate(epoch, config.lr, config.warmup, config.lr_halving_period)
            self.optimizer.lr = lr
            order = self.rng.permutation(count)
            losses: List[float] = []
            predictor_losses: List[float] = []

            for batch in range(batches):
                index = order[batch * config.batch_size : (batch + 1) * config.batch_size]
                images = self.dataset.images[index]
                labels = self.dataset.labels[index]
                eps = epsilon_schedule(epoch + batch / batches, config.warmup)

                try:
                    margins = self.batch_margins(images, labels, eps)
                except NumericError as exc:
                    raise TrainingDivergedError(epoch, batch, float("nan"), detail=str(exc)) from exc
                loss = certificate_loss(margins, labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, batch, value)
                self.net.zero_grad()
                loss.backward()
                self.optimizer.step()
                losses.append(value)

                predictor_value = self._update_predictor()
                if predictor_value is not None:
                    predictor_losses.append(predictor_value)

            end_eps = epsilon_schedule(epoch + 1, config.warmup)
            certify = config.eval_every > 0 and (
                (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs
            )
            clean, certified = self.evaluate(certify)
            metrics = EpochMetrics(
                epoch=epoch,
                eps=end_eps,
                lr=lr,
                loss=float(np.mean(losses)),
                clean_acc=clean,
                cert_acc_sample=certified,
                seconds=time.perf_counter() - started,
                predictor_loss=float(np.mean(predictor_losses)) if predictor_losses else None,
            )
            history.append(metrics)
            logger.info(
                "epoch %d: eps %.3f lr %.2e loss %.4f clean %.4f cert %s (%.1fs)",
                epoch,
                metrics.eps,
                lr,
                metrics.loss,
                clean,
                "-" if certified is None else f"{certified:.4f}",
                metrics.seconds,
            )
            if on_epoch is not None:
                on_epoch(metrics)

        return TrainResult(self.net, self.predictor, history)


def train(
    net: Network,
    dataset,
    config: TrainConfig,
    eval_set=None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
    predictor: Optional[MarginPredictor] = None,
) -> TrainResult:
    """Certified training; see Trainer."""
    return Trainer(net, dataset, config, eval_set, predictor).run(on_epoch)

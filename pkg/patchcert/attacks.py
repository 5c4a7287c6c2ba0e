"""
Attack bench

Empirical upper bounds on robust accuracy: IFGSM patch attacks swept over
placements, against plain models or models behind local gradient smoothing
(LGS). A defense-aware attack differentiates through the smoothing step,
holding the gradient map fixed on the backward pass.
"""

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from patchcert import functional as F
from patchcert.certifier import placement_grid
from patchcert.errors import ConfigError
from patchcert.network import Network
from patchcert.tensor import Function, Tensor
from patchcert.threats import PatchPlacement, PlacementGrid, ThreatModel

logger = logging.getLogger(__name__)

DEFENSES = ("none", "lgs")
LOCATION_SETS = ("all", "corners", "list")

LGS_GRID = {
    "lam": (1.0, 2.0, 3.0, 4.0, 5.0),
    "window": (2, 4, 7),
    "threshold": (0.05, 0.1, 0.2),
}


@dataclass(frozen=True)
class LGSParams:
    lam: float = 4.0
    window: int = 4
    threshold: float = 0.1

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"LGS lambda must be nonnegative, got {self.lam}")
        if self.window < 1:
            raise ConfigError(f"LGS window must be at least 1, got {self.window}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"LGS threshold must be in [0, 1], got {self.threshold}")


# ----------------------------------------------------------------------
# Local gradient smoothing
# ----------------------------------------------------------------------


def lgs_gradient_map(images: np.ndarray, params: LGSParams) -> np.ndarray:
    """
    Window-normalized, thresholded gradient magnitude g for [N, C, H, W] images.

    Forward differences (zero at the last row/column) give a per-pixel
    magnitude averaged over channels. The image is tiled into non-overlapping
    windows; inside each window g is the magnitude over the window's own
    maximum. A window is zeroed when its mean magnitude, relative to the
    image maximum, falls below the threshold.

    Returns:
        [N, 1, H, W] values in [0, 1]
    """
    x = np.asarray(images, dtype=np.float64)
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    magnitude = np.sqrt(dx * dx + dy * dy).mean(axis=1, keepdims=True)
    image_peak = magnitude.max(axis=(2, 3))

    g = np.zeros_like(magnitude)
    w = params.window
    height, width = magnitude.shape[2:]
    for top in range(0, height, w):
        for left in range(0, width, w):
            block = magnitude[:, :, top : top + w, left : left + w]
            peak = block.max(axis=(2, 3), keepdims=True)
            scaled = np.divide(block, peak, out=np.zeros_like(block), where=peak > 0)
            strength = np.divide(
                block.mean(axis=(2, 3)), image_peak, out=np.zeros_like(image_peak), where=image_peak > 0
            )
            weak = strength[:, 0] < params.threshold
            scaled[weak] = 0.0
            g[:, :, top : top + w, left : left + w] = scaled
    return g


def lgs_preprocess(images: np.ndarray, params: LGSParams) -> np.ndarray:
    """
    Local gradient smoothing: clip(x * (1 - lam * g(x)), 0, 1).

    Accepts one [C, H, W] image or a [N, C, H, W] batch.
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    batch = images[None] if single else images
    g = lgs_gradient_map(batch, params)
    out = np.clip(batch * (1.0 - params.lam * g), 0.0, 1.0).astype(np.float32)
    return out[0] if single else out


class SmoothingFunction(Function):
    """LGS with g held constant: backward multiplies by (1 - lam * g)."""

    def forward(self, x: np.ndarray, params: LGSParams = LGSParams()) -> np.ndarray:
        g = lgs_gradient_map(x, params)
        self.scale = (1.0 - params.lam * g).astype(x.dtype)
        return np.clip(x * self.scale, 0.0, 1.0).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.scale,)


def smooth(x: Tensor, params: LGSParams) -> Tensor:
    return SmoothingFunction.apply(x, params=params)


# ----------------------------------------------------------------------
# IFGSM
# ----------------------------------------------------------------------


@dataclass
class AttackConfig:
    """
    IFGSM patch attack settings.

    ``locations`` is "all", "corners" (the four corner anchors) or "list"
    (``anchors``); ``stride`` subsamples the "all" set.
    """

    steps: int = 50
    step_size: float = 0.05
    restarts: int = 1
    locations: str = "all"
    anchors: List[Tuple[int, int]] = field(default_factory=list)
    stride: int = 1
    defense: str = "none"
    lgs: LGSParams = field(default_factory=LGSParams)
    defense_aware: bool = False
    seed: int = 0
    placement_batch: int = 64

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be nonnegative, got {self.steps}")
        if self.step_size <= 0:
            raise ConfigError(f"step size must be positive, got {self.step_size}")
        if self.restarts < 0:
            raise ConfigError(f"restarts must be nonnegative, got {self.restarts}")
        if self.locations not in LOCATION_SETS:
            raise ConfigError(f"unknown location set {self.locations!r}")
        if self.locations == "list" and not self.anchors:
            raise ConfigError("an explicit location list needs at least one anchor")
        if self.stride < 1:
            raise ConfigError(f"stride must be at least 1, got {self.stride}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}")
        if self.placement_batch < 1:
            raise ConfigError("placement batch must be positive")
        self.lgs.validate()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def defended(images: np.ndarray, config: AttackConfig) -> np.ndarray:
    """Images as the classifier sees them at inference."""
    if config.defense == "lgs":
        return lgs_preprocess(images, config.lgs)
    return np.asarray(images, dtype=np.float32)


def defended_predict(net: Network, images: np.ndarray, config: AttackConfig) -> np.ndarray:
    return net.predict(defended(images, config))


def attack_placements(grid: PlacementGrid, config: AttackConfig) -> List[int]:
    """Placement indices of the configured location set."""
    if config.locations == "corners":
        return grid.corner_indices()
    if config.locations == "list":
        return [grid.index_of(tuple(anchor)) for anchor in config.anchors]
    return grid.strided_indices(config.stride)


def _loss_gradient(
    net: Network, x: np.ndarray, labels: np.ndarray, config: AttackConfig
) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the raw images."""
    leaf = Tensor(x, requires_grad=True)
    inputs = smooth(leaf, config.lgs) if config.defense == "lgs" and config.defense_aware else leaf
    loss = F.softmax_cross_entropy(net(inputs), labels) * float(len(labels))
    loss.backward()
    assert leaf.grad is not None
    return leaf.grad


def _row_losses(net: Network, x: np.ndarray, labels: np.ndarray, config: AttackConfig) -> np.ndarray:
    logits = net.logits(defended(x, config)).astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return log_norm - shifted[np.arange(len(labels)), labels]


@dataclass
class PatchAttackResult:
    """Per-placement outcome of a batched attack."""

    images: np.ndarray
    success: np.ndarray
    losses: np.ndarray
    predictions: np.ndarray


def ifgsm_patches(
    net: Network,
    image: np.ndarray,
    y_true: int,
    masks: np.ndarray,
    config: AttackConfig,
    rng: Optional[np.random.Generator] = None,
) -> PatchAttackResult:
    """
    Untargeted IFGSM against one image at several placements at once.

    Each step is x <- clip(x + step * sign(grad), 0, 1) on mask pixels only.
    The first iterate that is misclassified (after the defense) is kept.

    Args:
        image: [C, H, W]
        masks: [P, H, W] boolean pixel masks
        rng: Source of random restarts (restarts beyond the first)
    """
    rng = rng or np.random.default_rng(config.seed)
    clean = np.asarray(image, dtype=np.float32)
    placements = masks.shape[0]
    inside = np.broadcast_to(masks[:, None], (placements,) + clean.shape)
    origin = np.broadcast_to(clean, inside.shape)
    labels = np.full(placements, y_true, dtype=np.int64)

    best = origin.copy()
    success = np.zeros(placements, dtype=bool)

    def record(x: np.ndarray, active: np.ndarray) -> None:
        fooled = active & (defended_predict(net, x, config) != y_true)
        best[fooled] = x[fooled]
        success[fooled] = True

    for restart in range(max(config.restarts, 1)):
        if restart == 0:
            x = origin.copy()
        else:
            noise = rng.uniform(0.0, 1.0, size=inside.shape).astype(np.float32)
            x = np.where(inside, noise, origin)
        record(x, ~success)
        for _ in range(config.steps):
            active = ~success
            if not active.any():
                break
            grad = _loss_gradient(net, x[active], labels[active], config)
            stepped = np.clip(x[active] + config.step_size * np.sign(grad), 0.0, 1.0)
            x[active] = np.where(inside[active], stepped, origin[active]).astype(np.float32)
            record(x, active)
        if success.all():
            break
        if restart == 0 and config.steps:
            best[~success] = x[~success]

    losses = _row_losses(net, best, labels, config)
    predictions = defended_predict(net, best, config)
    return PatchAttackResult(best, success, losses, predictions)


def ifgsm_patch(
    net: Network,
    image: np.ndarray,
    y_true: int,
    placement: PatchPlacement,
    config: AttackConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    IFGSM restricted to one placement; returns the adversarial [C, H, W] image.

    Pixels outside the mask are returned bit-identical to the input.
    """
    config.validate()
    image = np.asarray(image, dtype=np.float32)
    mask = placement.pixel_mask(image.shape[1:])[None]
    return ifgsm_patches(net, image, y_true, mask, config, rng).images[0]


# ----------------------------------------------------------------------
# Dataset-level accuracy
# ----------------------------------------------------------------------


@dataclass
class AttackSummary:
    count: int
    clean_correct: int
    survived: int
    placements: int
    elapsed: float = 0.0

    @property
    def clean_accuracy(self) -> float:
        return self.clean_correct / self.count if self.count else 0.0

    @property
    def adversarial_accuracy(self) -> float:
        return self.survived / self.count if self.count else 0.0


def attack_image(
    net: Network,
    image: np.ndarray,
    y_true: int,
    grid: PlacementGrid,
    indices: Sequence[int],
    config: AttackConfig,
    rng: np.random.Generator,
) -> Dict[str, Any]:
    """
    Attack one image over a placement set, stopping at the first success.

    Returns:
        Record with the successful anchor, success flag, final loss and the
        prediction on the attacked image. A misclassified clean image is a
        success with no anchor.
    """
    clean_pred = int(defended_predict(net, image[None], config)[0])
    if clean_pred != y_true:
        return {"anchor": None, "success": True, "final_loss": None, "prediction": clean_pred}

    worst_loss, last_pred = -np.inf, clean_pred
    for offset in range(0, len(indices), config.placement_batch):
        chunk = list(indices[offset : offset + config.placement_batch])
        result = ifgsm_patches(net, image, y_true, grid.masks[chunk], config, rng)
        if result.success.any():
            hit = int(np.argmax(result.success))
            return {
                "anchor": list(grid.placements[chunk[hit]].anchor),
                "success": True,
                "final_loss": float(result.losses[hit]),
                "prediction": int(result.predictions[hit]),
            }
        top = int(np.argmax(result.losses))
        if result.losses[top] > worst_loss:
            worst_loss, last_pred = float(result.losses[top]), int(result.predictions[top])
    return {"anchor": None, "success": False, "final_loss": worst_loss, "prediction": last_pred}


def empirical_adversarial_accuracy(
    net: Network,
    dataset,
    threat: ThreatModel,
    config: AttackConfig,
    on_result: Optional[Callable[[Dict[str, Any]], None]] = None,
    progress: Optional[Callable[[int], None]] = None,
) -> AttackSummary:
    """
    Fraction of images that no placement in the location set can flip.

    Misclassified clean images count as attacked. The defense, if any, is
    applied at inference for every prediction.
    """
    config.validate()
    if threat.kind != "patch" or threat.mask is None:
        raise ConfigError("empirical attacks need a patch threat")
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ConfigError("attack needs a nonempty sample")
    grid = placement_grid(threat.mask, tuple(images.shape[2:]))
    indices = attack_placements(grid, config)
    rng = np.random.default_rng(config.seed)
    summary = AttackSummary(len(labels), 0, 0, len(indices))

    for index, (image, label) in enumerate(zip(images, labels)):
        label = int(label)
        record = attack_image(net, image, label, grid, indices, config, rng)
        clean_ok = not (record["success"] and record["anchor"] is None)
        summary.clean_correct += int(clean_ok)
        summary.survived += int(not record["success"])
        if on_result is not None:
            on_result(dict(index=index, label=label, **record))
        if progress is not None:
            progress(index + 1)

    logger.info(
        "attack %s over %d placements: clean %.4f, adversarial %.4f",
        "defense-aware" if config.defense_aware else "standard",
        len(indices),
        summary.clean_accuracy,
        summary.adversarial_accuracy,
    )
    return summary


@dataclass
class LGSTuning:
    best: LGSParams
    best_accuracy: float
    table: List[Dict[str, Any]]


def tune_lgs(
    net: Network,
    dataset,
    threat: ThreatModel,
    config: AttackConfig,
    grid: Optional[Dict[str, Sequence]] = None,
) -> LGSTuning:
    """
    Grid-search LGS parameters that maximize accuracy under the defense-unaware attack.

    Ties keep the first grid point in (lam, window, threshold) order.
    """
    grid = grid or LGS_GRID
    table: List[Dict[str, Any]] = []
    best: Optional[Tuple[float, LGSParams]] = None
    for lam, window, threshold in itertools.product(
        grid["lam"], grid["window"], grid["threshold"]
    ):
        params = LGSParams(float(lam), int(window), float(threshold))
        trial = AttackConfig(**dict(config.to_dict(), lgs=params, defense="lgs", defense_aware=False))
        summary = empirical_adversarial_accuracy(net, dataset, threat, trial)
        table.append(
            {
                "lam": params.lam,
                "window": params.window,
                "threshold": params.threshold,
                "clean_accuracy": summary.clean_accuracy,
                "adversarial_accuracy": summary.adversarial_accuracy,
            }
        )
        if best is None or summary.adversarial_accuracy > best[0]:
            best = (summary.adversarial_accuracy, params)
    assert best is not None
    return LGSTuning(best[1], best[0], table)

"""
Threat Models

Feasible input sets for the two adversaries:

- patch: every pixel under a shape mask (all channels) may take any value in
  the intensity range, at any placement of the mask inside the image;
- sparse: any k pixels anywhere may change, bounded at the first layer by the
  sum of the k largest per-pixel weight magnitudes.

Shapes are cell sets relative to their bounding-box origin; slanted shapes
follow 45-degree diagonals. Custom shapes load from "row col" text files.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from patchcert import SHAPES_DIR
from patchcert import functional as F
from patchcert.errors import ConfigError
from patchcert.interval import IntervalTensor
from patchcert.network import Affine, Conv2D
from patchcert.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

SHAPE_KINDS = ("square", "rectangle", "line", "diamond", "parallelogram", "custom")

# Rectangles with (slightly more than) the requested pixel count; the
# transfer sweep reports the worst of these.
RECTANGLE_MENU = {
    16: [(2, 8), (8, 2), (2, 9), (9, 2)],
    25: [(2, 13), (13, 2), (3, 9), (9, 3)],
}

DEFAULT_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class ShapeMask:
    """A set of (row, col) cells anchored at its bounding-box origin."""

    kind: str
    cells: Tuple[Cell, ...]

    def __post_init__(self) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        cells = tuple(sorted(set((int(r), int(c)) for r, c in self.cells)))
        if not cells:
            raise ConfigError("a shape needs at least one cell")
        if min(r for r, _ in cells) != 0 or min(c for _, c in cells) != 0:
            raise ConfigError("shape cells must start at row 0 and column 0")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_cells(cls, cells: Iterable[Cell], kind: str = "custom") -> "ShapeMask":
        """Build a shape, shifting the cells so the bounding box starts at (0, 0)."""
        cells = list(cells)
        if not cells:
            raise ConfigError("a shape needs at least one cell")
        top = min(r for r, _ in cells)
        left = min(c for _, c in cells)
        return cls(kind, tuple((r - top, c - left) for r, c in cells))

    @property
    def pixel_count(self) -> int:
        return len(self.cells)

    @property
    def height(self) -> int:
        return max(r for r, _ in self.cells) + 1

    @property
    def width(self) -> int:
        return max(c for _, c in self.cells) + 1

    @property
    def name(self) -> str:
        if self.kind in ("square", "rectangle", "line"):
            return f"{self.kind}-{self.height}x{self.width}"
        return f"{self.kind}-{self.pixel_count}"

    def grid(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        rows, cols = zip(*self.cells)
        out[list(rows), list(cols)] = True
        return out


def _square_side(pixel_count: int, kind: str) -> int:
    side = int(round(np.sqrt(pixel_count)))
    if side < 1 or side * side != pixel_count:
        raise ConfigError(f"{kind} shapes need a square pixel count, got {pixel_count}")
    return side


def make_shape(kind: str, pixel_count: int) -> ShapeMask:
    """
    Build a built-in shape with exactly ``pixel_count`` cells.

    Rectangles return the first entry of the menu for the count (which may
    hold slightly more pixels); use ``shape_variants`` for the full menu.

    Raises:
        ConfigError: If the count cannot be realized by the kind
    """
    if pixel_count < 1:
        raise ConfigError(f"pixel count must be positive, got {pixel_count}")
    if kind == "square":
        n = _square_side(pixel_count, kind)
        return ShapeMask(kind, tuple((r, c) for r in range(n) for c in range(n)))
    if kind == "line":
        return ShapeMask(kind, tuple((0, c) for c in range(pixel_count)))
    if kind == "rectangle":
        return shape_variants(kind, pixel_count)[0]
    if kind == "diamond":
        # An n x n square rotated by 45 degrees onto the diagonal lattice
        n = _square_side(pixel_count, kind)
        return ShapeMask(kind, tuple((i + j, n - 1 + i - j) for i in range(n) for j in range(n)))
    if kind == "parallelogram":
        # Each row shifted one column right of the row above
        n = _square_side(pixel_count, kind)
        return ShapeMask(kind, tuple((i, i + j) for i in range(n) for j in range(n)))
    raise ConfigError(f"no built-in {kind!r} shape; load custom shapes from a cell file")


def shape_variants(kind: str, pixel_count: int) -> List[ShapeMask]:
    """All masks evaluated for a kind/count pair (only rectangles have several)."""
    if kind != "rectangle":
        return [make_shape(kind, pixel_count)]
    if pixel_count not in RECTANGLE_MENU:
        raise ConfigError(f"no rectangle menu for {pixel_count} pixels")
    return [
        ShapeMask("rectangle", tuple((r, c) for r in range(h) for c in range(w)))
        for h, w in RECTANGLE_MENU[pixel_count]
    ]


def load_shape_file(path: Union[str, Path], kind: str = "custom") -> ShapeMask:
    """
    Read a shape from a text file with one "row col" pair per line.

    Blank lines and lines starting with '#' are ignored.
    """
    cells = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'row col', got {line!r}")
        try:
            row, col = int(parts[0]), int(parts[1])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: non-integer cell {line!r}") from None
        if row < 0 or col < 0:
            raise ConfigError(f"{path}:{lineno}: negative cell offset")
        cells.append((row, col))
    return ShapeMask.from_cells(cells, kind=kind)


def save_shape_file(mask: ShapeMask, path: Union[str, Path]) -> None:
    lines = [f"# {mask.name}"] + [f"{r} {c}" for r, c in mask.cells]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def bundled_shape_files() -> List[Path]:
    """Frozen cell lists of the slanted shapes shipped with the package."""
    return sorted(SHAPES_DIR.glob("*.txt"))


@dataclass(frozen=True)
class PatchPlacement:
    """A mask positioned with its bounding-box top-left at ``anchor``."""

    mask: ShapeMask
    anchor: Cell

    def cells_in_image(self) -> List[Cell]:
        top, left = self.anchor
        return [(top + r, left + c) for r, c in self.mask.cells]

    def fits(self, image_dims: Tuple[int, int]) -> bool:
        h, w = image_dims
        top, left = self.anchor
        return (
            top >= 0 and left >= 0 and top + self.mask.height <= h and left + self.mask.width <= w
        )

    def pixel_mask(self, image_dims: Tuple[int, int]) -> np.ndarray:
        if not self.fits(image_dims):
            raise ConfigError(f"placement {self.anchor} of {self.mask.name} leaves {image_dims}")
        out = np.zeros(image_dims, dtype=bool)
        rows, cols = zip(*self.cells_in_image())
        out[list(rows), list(cols)] = True
        return out


def enumerate_placements(image_dims: Tuple[int, int], mask: ShapeMask) -> List[PatchPlacement]:
    """
    Every in-bounds placement, anchors in row-major order.

    An n x n square in an m x m image has (m - n + 1)^2 placements.

    Raises:
        ConfigError: If the mask's bounding box exceeds the image
    """
    h, w = image_dims
    if mask.height > h or mask.width > w:
        raise ConfigError(f"{mask.name} does not fit in a {h}x{w} image")
    return [
        PatchPlacement(mask, (top, left))
        for top in range(h - mask.height + 1)
        for left in range(w - mask.width + 1)
    ]


@dataclass
class PlacementGrid:
    """All placements of one mask with their pixel masks stacked as [P, H, W]."""

    mask: ShapeMask
    image_dims: Tuple[int, int]
    placements: List[PatchPlacement] = field(init=False)
    masks: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.image_dims = (int(self.image_dims[0]), int(self.image_dims[1]))
        self.placements = enumerate_placements(self.image_dims, self.mask)
        self.masks = np.stack([p.pixel_mask(self.image_dims) for p in self.placements])

    @property
    def rows(self) -> int:
        return self.image_dims[0] - self.mask.height + 1

    @property
    def cols(self) -> int:
        return self.image_dims[1] - self.mask.width + 1

    def __len__(self) -> int:
        return len(self.placements)

    def index_of(self, anchor: Cell) -> int:
        top, left = anchor
        if not (0 <= top < self.rows and 0 <= left < self.cols):
            raise ConfigError(f"anchor {anchor} is not a valid placement")
        return top * self.cols + left

    def corner_indices(self) -> List[int]:
        corners = [(0, 0), (0, self.cols - 1), (self.rows - 1, 0), (self.rows - 1, self.cols - 1)]
        return sorted(set(self.index_of(a) for a in corners))

    def strided_indices(self, stride: int) -> List[int]:
        if stride < 1:
            raise ConfigError(f"placement stride must be positive, got {stride}")
        return [
            self.index_of((top, left))
            for top in range(0, self.rows, stride)
            for left in range(0, self.cols, stride)
        ]


@dataclass
class ThreatModel:
    """
    Patch or sparse adversary over images in ``intensity_range``.

    ``eps_scale`` shrinks the patch interval towards the clean pixel value;
    1.0 is the full threat.
    """

    kind: str = "patch"
    mask: Optional[ShapeMask] = None
    k: int = 0
    intensity_range: Tuple[float, float] = DEFAULT_RANGE
    eps_scale: float = 1.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        lo, hi = self.intensity_range
        if not lo < hi:
            raise ConfigError(f"intensity range must have lo < hi, got {self.intensity_range}")
        if not 0.0 <= self.eps_scale <= 1.0:
            raise ConfigError(f"eps scale must be in [0, 1], got {self.eps_scale}")
        if self.kind == "patch":
            if self.mask is None:
                raise ConfigError("patch threat needs a shape mask")
        elif self.kind == "sparse":
            if self.k < 0:
                raise ConfigError(f"sparse k must be nonnegative, got {self.k}")
        else:
            raise ConfigError(f"unknown threat kind {self.kind!r}")

    @property
    def description(self) -> str:
        if self.kind == "sparse":
            return f"sparse-k{self.k}"
        assert self.mask is not None
        return f"patch-{self.mask.name}"


def _check_range(images: np.ndarray, intensity_range: Tuple[float, float]) -> None:
    lo, hi = intensity_range
    if images.size and (images.min() < lo or images.max() > hi):
        raise ConfigError(f"image values leave the intensity range {intensity_range}")


def patch_input_intervals(
    images: np.ndarray,
    masks: np.ndarray,
    intensity_range: Tuple[float, float] = DEFAULT_RANGE,
    eps_scale: float = 1.0,
) -> IntervalTensor:
    """
    Input boxes for a batch of images under a batch of pixel masks.

    Inside a mask: lower = (1 - eps) x + eps lo, upper = (1 - eps) x + eps hi,
    on every channel. Outside: lower = upper = x.

    Args:
        images: [B, C, H, W]
        masks: [P, H, W] shared by all images, or [B, P, H, W] per image

    Returns:
        Interval of shape [B * P, C, H, W], image-major
    """
    images = np.asarray(images, dtype=np.float32)
    _check_range(images, intensity_range)
    if masks.ndim == 3:
        masks = np.broadcast_to(masks, (images.shape[0],) + masks.shape)
    if masks.shape[0] != images.shape[0] or masks.shape[2:] != images.shape[2:]:
        raise ConfigError(f"masks {masks.shape} do not match images {images.shape}")
    lo, hi = intensity_range
    x = images[:, None]
    m = masks[:, :, None]
    keep = np.float32(1.0 - eps_scale)
    lower = np.where(m, keep * x + np.float32(eps_scale * lo), x)
    upper = np.where(m, keep * x + np.float32(eps_scale * hi), x)
    shape = (images.shape[0] * masks.shape[1],) + images.shape[1:]
    return IntervalTensor(Tensor(lower.reshape(shape)), Tensor(upper.reshape(shape)))


def patch_input_interval(
    image: np.ndarray,
    placement: PatchPlacement,
    intensity_range: Tuple[float, float] = DEFAULT_RANGE,
    eps_scale: float = 1.0,
) -> IntervalTensor:
    """
    Input box for one image ([C, H, W]) and one placement, same shape as the image.

    Raises:
        ConfigError: If the placement leaves the image
    """
    image = np.asarray(image, dtype=np.float32)
    pixel_mask = placement.pixel_mask(image.shape[1:])
    box = patch_input_intervals(image[None], pixel_mask[None], intensity_range, eps_scale)
    return box.reshape(*image.shape)


def sparse_first_layer_bounds(
    x: Union[np.ndarray, Tensor],
    layer: Union[Affine, Conv2D],
    k: int,
    channels: int = 1,
    eps_scale: float = 1.0,
) -> IntervalTensor:
    """
    First-layer interval under a k-pixel sparse adversary.

    Each output unit gets center W x + b and half-width equal to the sum of
    the k largest per-pixel weight magnitudes, where a pixel's magnitude is
    |W| summed over its channels. Convolutions use the kernel's receptive
    field (k saturates at the field size).

    Args:
        x: Point input, [N, C, H, W] for convolutions or [N, C*H*W] for affine
        layer: The network's first linear layer
        k: Number of pixels the adversary may change (0 gives a point interval)
        channels: Channel count of the flattened image for affine layers
        eps_scale: Shrinks the half-width during the warm-up ramp

    Raises:
        ConfigError: If k is negative or exceeds the pixel count
    """
    x = as_tensor(x)
    if isinstance(layer, Affine):
        out, inputs = layer.weight.shape
        if inputs % channels:
            raise ConfigError(f"{inputs} inputs cannot split into {channels} channels")
        pixels = inputs // channels
        if not 0 <= k <= pixels:
            raise ConfigError(f"sparse k must be in [0, {pixels}], got {k}")
        magnitude = F.sum_(F.reshape(F.abs_(layer.weight), (out, channels, pixels)), axis=1)
        radius = F.topk_sum(magnitude, k)
        center = F.affine_forward(F.reshape(x, (x.shape[0], -1)), layer.weight, layer.bias)
    elif isinstance(layer, Conv2D):
        pixels = int(np.prod(x.shape[2:]))
        if not 0 <= k <= pixels:
            raise ConfigError(f"sparse k must be in [0, {pixels}], got {k}")
        o, c, kh, kw = layer.kernel.shape
        magnitude = F.sum_(F.reshape(F.abs_(layer.kernel), (o, c, kh * kw)), axis=1)
        radius = F.reshape(F.topk_sum(magnitude, min(k, kh * kw)), (1, o, 1, 1))
        center = F.conv2d_forward(x, layer.kernel, layer.bias, stride=layer.stride)
    else:
        raise ConfigError(f"sparse bounds need an affine or convolution first layer, got {layer!r}")
    if eps_scale != 1.0:
        radius = radius * eps_scale
    return IntervalTensor(center - radius, center + radius)

"""
Margin predictor

A small U-shaped encoder-decoder that maps an image to a grid of predicted
certified margins, one channel per label, one cell per patch placement.
All convolutions are valid (unpadded); the input is zero-padded just enough
that the decoder output covers the placement grid, and skip connections are
center-cropped to the decoder resolution.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from patchcert import functional as F
from patchcert.errors import ConfigError, DimensionError
from patchcert.network import Conv2D
from patchcert.tensor import Parameter, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)

CHANNELS = (16, 32, 64)
MAX_INPUT_PAD = 64

# (name, kernel, stride); channel widths come from CHANNELS and the label count.
_LAYOUT = (
    ("enc1", 3, 1),
    ("down1", 2, 2),
    ("enc2", 3, 1),
    ("down2", 2, 2),
    ("bottleneck", 3, 1),
    ("up2", 1, 1),
    ("dec2", 3, 1),
    ("up1", 1, 1),
    ("dec1", 1, 1),
    ("head", 1, 1),
)


def _decoder_size(size: int) -> Optional[int]:
    """Spatial extent of the decoder output for a padded input extent."""
    enc1 = size - 2
    down1 = (enc1 - 2) // 2 + 1
    enc2 = down1 - 2
    down2 = (enc2 - 2) // 2 + 1
    bottleneck = down2 - 2
    if min(enc1, down1, enc2, down2, bottleneck) < 1:
        return None
    dec2 = 2 * bottleneck - 2
    if dec2 < 1 or 2 * bottleneck > enc2:
        return None
    out = 2 * dec2
    if out > enc1:
        return None
    return out


def input_padding(image_size: int, grid_size: int) -> int:
    """
    Smallest zero padding for which the decoder output covers the grid.

    Raises:
        ConfigError: If no padding up to MAX_INPUT_PAD is enough
    """
    for pad in range(MAX_INPUT_PAD + 1):
        out = _decoder_size(image_size + 2 * pad)
        if out is not None and out >= grid_size:
            return pad
    raise ConfigError(f"no predictor padding covers a {grid_size} grid on {image_size} inputs")


def center_crop(x: Tensor, height: int, width: int) -> Tensor:
    _, _, h, w = x.shape
    if height > h or width > w:
        raise DimensionError("center crop larger than input", (height, width), (h, w))
    return F.crop2d(x, (h - height) // 2, (w - width) // 2, height, width)


class MarginPredictor:
    """
    Predicts m[label, row, col], the certified margin of each placement.

    Args:
        input_shape: Image shape (C, H, W)
        num_labels: Output channels
        grid_shape: Placement grid (rows, cols)
        seed: Weight initialization seed
    """

    kind = "margin-predictor"

    def __init__(
        self,
        input_shape: Sequence[int],
        num_labels: int,
        grid_shape: Tuple[int, int],
        seed: int = 0,
    ):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_labels = int(num_labels)
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        channels, height, width = self.input_shape
        self.pad = input_padding(max(height, width), max(self.grid_shape))

        c1, c2, c3 = CHANNELS
        in_out = {
            "enc1": (channels, c1),
            "down1": (c1, c2),
            "enc2": (c2, c2),
            "down2": (c2, c3),
            "bottleneck": (c3, c3),
            "up2": (c3, c2),
            "dec2": (2 * c2, c2),
            "up1": (c2, c1),
            "dec1": (2 * c1, c1),
            "head": (c1, self.num_labels),
        }
        rng = np.random.default_rng(seed)
        self.convs: Dict[str, Conv2D] = {}
        for name, kernel, stride in _LAYOUT:
            cin, cout = in_out[name]
            self.convs[name] = Conv2D(cin, cout, kernel, stride, rng=rng)

    def parameters(self) -> List[Parameter]:
        return [p for conv in self.convs.values() for p in conv.parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def _block(self, name: str, x: Tensor, activate: bool = True) -> Tensor:
        out = self.convs[name].forward(x)
        return F.relu_forward(out) if activate else out

    def forward(self, images) -> Tensor:
        """[B, C, H, W] images to [B, labels, rows, cols] predicted margins."""
        x = as_tensor(images)
        if x.shape[1:] != self.input_shape:
            raise DimensionError("predictor input", x.shape[1:], self.input_shape)
        if self.pad:
            x = F.pad2d(x, self.pad)

        skip1 = self._block("enc1", x)
        skip2 = self._block("enc2", self._block("down1", skip1))
        deep = self._block("bottleneck", self._block("down2", skip2))

        up = self._block("up2", F.upsample_nearest(deep, 2))
        merged = F.concat([up, center_crop(skip2, up.shape[2], up.shape[3])], axis=1)
        dec = self._block("dec2", merged)

        up = self._block("up1", F.upsample_nearest(dec, 2))
        merged = F.concat([up, center_crop(skip1, up.shape[2], up.shape[3])], axis=1)
        dec = self._block("dec1", merged)
        out = self._block("head", dec, activate=False)
        return center_crop(out, *self.grid_shape)

    __call__ = forward

    def predict(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(images)).data

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.kind,
            "input_shape": list(self.input_shape),
            "num_labels": self.num_labels,
            "grid_shape": list(self.grid_shape),
            "layers": [
                dict(conv.describe(), name=name) for name, conv in self.convs.items()
            ],
        }

    @classmethod
    def from_description(cls, desc: Dict[str, Any]) -> "MarginPredictor":
        predictor = cls(desc["input_shape"], desc["num_labels"], tuple(desc["grid_shape"]))
        for param in predictor.parameters():
            param.data = np.zeros_like(param.data)
        return predictor

    def __repr__(self) -> str:
        rows, cols = self.grid_shape
        return f"MarginPredictor(labels={self.num_labels}, grid={rows}x{cols}, pad={self.pad})"

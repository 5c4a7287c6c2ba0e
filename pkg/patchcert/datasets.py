"""
Dataset ingestion for MNIST (IDX files) and CIFAR-10 (binary batches).

Images come back as float32 arrays of shape [N, C, H, W] scaled to [0, 1]
by /255, in file order. Writers for both formats exist so tests can build
small fixtures.
"""

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Tuple, Union

import numpy as np

from patchcert.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

DATASET_SHAPES = {
    "mnist": (1, 28, 28),
    "cifar10": CIFAR_SHAPE,
}
SPLITS = ("train", "test")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass
class Dataset:
    """Immutable image/label arrays with a kind and split tag."""

    images: np.ndarray
    labels: np.ndarray
    kind: str = "custom"
    split: str = "test"
    num_labels: int = 10

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise ConfigError("dataset is empty")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_labels):
            raise ConfigError(f"labels must lie in [0, {self.num_labels})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def take(self, count: Optional[int]) -> "Dataset":
        """The first ``count`` examples (all of them when count is None)."""
        if count is None or count >= len(self):
            return self
        if count < 1:
            raise ConfigError(f"count must be positive, got {count}")
        return self.select(np.arange(count))

    def sample(self, count: Optional[int], seed: int = 0) -> "Dataset":
        """``count`` examples drawn without replacement, kept in dataset order."""
        if count is None or count >= len(self):
            return self
        if count < 1:
            raise ConfigError(f"count must be positive, got {count}")
        rng = np.random.default_rng(seed)
        return self.select(np.sort(rng.choice(len(self), size=count, replace=False)))

    def select(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices], self.labels[indices], self.kind, self.split, self.num_labels
        )

    def checksum(self) -> str:
        """sha256 of the first image's float32 bytes."""
        return hashlib.sha256(np.ascontiguousarray(self.images[0]).tobytes()).hexdigest()


# ----------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------


def _open(path: Path) -> BinaryIO:
    if path.suffix == ".gz":
        return gzip.open(path, "rb")  # type: ignore[return-value]
    return open(path, "rb")


def _read_bytes(path: Path) -> bytes:
    with _open(path) as handle:
        return handle.read()


def read_idx(path: PathLike) -> np.ndarray:
    """
    Read an unsigned-byte IDX file (images: magic 2051, labels: magic 2049).

    Raises:
        FormatError: On an unknown magic number or a truncated payload
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path.name}: truncated IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        header = 16
    elif magic == IDX_LABELS_MAGIC:
        header = 8
    else:
        raise FormatError(f"{path.name}: bad IDX magic {magic}", offset=0)
    if len(raw) < header:
        raise FormatError(f"{path.name}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{(header - 4) // 4}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(
            f"{path.name}: payload has {len(raw) - header} of {expected - header} bytes",
            offset=len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected - header, offset=header).reshape(dims)


def write_idx(path: PathLike, array: np.ndarray) -> None:
    """Write uint8 images [N, H, W] or labels [N] as an IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise ConfigError(f"IDX writer takes [N, H, W] or [N] arrays, got {array.shape}")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as handle:
            handle.write(payload)
    else:
        path.write_bytes(payload)


def _find(root: Path, name: str) -> Path:
    for folder in (root, root / "mnist", root / "MNIST" / "raw"):
        for candidate in (folder / name, folder / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise ConfigError(f"{name} not found under {root}")


def load_mnist(root: PathLike, split: str = "train") -> Dataset:
    root = Path(root)
    images_name, labels_name = MNIST_FILES[split]
    images = read_idx(_find(root, images_name))
    labels = read_idx(_find(root, labels_name))
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"{images_name}/{labels_name}: swapped image and label files")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    scaled = images[:, None].astype(np.float32) / 255.0
    return Dataset(scaled, labels, kind="mnist", split=split)


# ----------------------------------------------------------------------
# CIFAR-10
# ----------------------------------------------------------------------


def read_cifar_batch(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a CIFAR-10 binary batch of 3073-byte records (label, then 3072
    channel-planar pixel bytes).

    Raises:
        FormatError: If the file is not a whole number of records or a label
            byte is outside 0..9
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"{path.name}: truncated CIFAR record", offset=whole)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path.name}: label byte {labels[bad[0]]}", offset=int(bad[0]) * CIFAR_RECORD)
    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE)
    return images, labels


def write_cifar_batch(path: PathLike, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 images [N, 3, 32, 32] and labels as CIFAR-10 records."""
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != CIFAR_SHAPE:
        raise ConfigError(f"CIFAR images must be [N, 3, 32, 32], got {images.shape}")
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    records = np.concatenate([labels, images.reshape(len(images), -1)], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10(root: PathLike, split: str = "train") -> Dataset:
    root = Path(root)
    folders = (root, root / "cifar-10-batches-bin", root / "cifar10")
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for name in CIFAR_FILES[split]:
        path = next((f / name for f in folders if (f / name).exists()), None)
        if path is None:
            raise ConfigError(f"{name} not found under {root}")
        batch_images, batch_labels = read_cifar_batch(path)
        images.append(batch_images)
        labels.append(batch_labels)
    scaled = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(scaled, np.concatenate(labels), kind="cifar10", split=split)


def load_dataset(kind: str, path: PathLike, split: str = "train") -> Dataset:
    """
    Load MNIST or CIFAR-10 from ``path``.

    Args:
        kind: "mnist" or "cifar10"
        path: Directory holding the raw files
        split: "train" or "test"

    Raises:
        ConfigError: Unknown kind/split or missing files
        FormatError: Corrupt files, with the byte offset
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r} (expected one of {SPLITS})")
    if kind == "mnist":
        dataset = load_mnist(path, split)
    elif kind == "cifar10":
        dataset = load_cifar10(path, split)
    else:
        raise ConfigError(f"unknown dataset {kind!r} (expected mnist or cifar10)")
    logger.info(
        "loaded %s/%s: %d images, first-image sha256 %s",
        kind,
        split,
        len(dataset),
        dataset.checksum()[:16],
    )
    return dataset

"""
Checkpoint container for classifiers and margin predictors.

Layout (all integers little-endian):

    b"PCRT"                 magic
    u16                     format version
    u32                     descriptor length in bytes
    descriptor              UTF-8 YAML: architecture, parameter table, metadata
    blobs                   float32 parameter arrays in table order

Saving is deterministic, so save -> load -> save reproduces the same bytes.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import yaml

from patchcert.errors import FormatError, IntegrityError
from patchcert.network import Network
from patchcert.predictor import MarginPredictor
from patchcert.tensor import Parameter

logger = logging.getLogger(__name__)

MAGIC = b"PCRT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")

Model = Union[Network, MarginPredictor]


@dataclass
class Checkpoint:
    model: Model
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_predictor(self) -> bool:
        return isinstance(self.model, MarginPredictor)


def named_parameters(model: Model) -> Iterator[Tuple[str, Parameter]]:
    """("<layer>.<param>", parameter) pairs in blob order."""
    if isinstance(model, MarginPredictor):
        for name, conv in model.convs.items():
            for param in conv.parameters():
                yield f"{name}.{param.name}", param
    else:
        for index, layer in enumerate(model.layers):
            for param in layer.parameters():
                yield f"{index}:{layer.kind}.{param.name}", param


def _descriptor(model: Model, metadata: Optional[Dict[str, Any]]) -> bytes:
    table = [{"name": name, "shape": list(p.shape)} for name, p in named_parameters(model)]
    document = {
        "architecture": model.describe(),
        "parameters": table,
        "metadata": metadata or {},
    }
    text = yaml.safe_dump(document, sort_keys=True, default_flow_style=False)
    return text.encode("utf-8")


def save_checkpoint(
    model: Model, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write ``model`` and its metadata to ``path``.

    Args:
        model: Network or MarginPredictor
        path: Destination file (parent directories are created)
        metadata: YAML-safe training metadata (config, epoch, eps, seed)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    descriptor = _descriptor(model, metadata)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(descriptor)), descriptor]
    for _, param in named_parameters(model):
        chunks.append(np.ascontiguousarray(param.data, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug("saved %s (%d parameter arrays) to %s", model, len(chunks) - 2, path)
    return path


def _rebuild(architecture: Dict[str, Any]) -> Model:
    if architecture.get("name") == MarginPredictor.kind:
        return MarginPredictor.from_description(architecture)
    return Network.from_description(architecture)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        FormatError: Bad magic, unsupported version or unreadable descriptor
        IntegrityError: A parameter blob is missing, truncated or has the
            wrong shape; the error names the layer
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path.name}: truncated header", offset=len(raw))
    magic, version, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version}", offset=4)
    start = _HEADER.size
    if len(raw) < start + length:
        raise FormatError(f"{path.name}: truncated descriptor", offset=len(raw))
    try:
        document = yaml.safe_load(raw[start : start + length].decode("utf-8"))
        architecture = document["architecture"]
        table: List[Dict[str, Any]] = document["parameters"]
    except (yaml.YAMLError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path.name}: unreadable descriptor ({exc})", offset=start) from exc

    model = _rebuild(architecture)
    params = list(named_parameters(model))
    if len(params) != len(table):
        raise IntegrityError(
            f"descriptor lists {len(table)} parameter arrays, architecture has {len(params)}"
        )

    offset = start + length
    for (name, param), entry in zip(params, table):
        layer = name.rsplit(".", 1)[0]
        if entry.get("name") != name or tuple(entry.get("shape", ())) != param.shape:
            raise IntegrityError(f"expected {name} {param.shape}, descriptor has {entry}", layer)
        size = int(np.prod(param.shape)) * 4
        if offset + size > len(raw):
            raise IntegrityError(
                f"blob {name} truncated ({len(raw) - offset} of {size} bytes)", layer
            )
        blob = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=offset)
        param.data = blob.reshape(param.shape).astype(np.float32)
        param.zero_grad()
        offset += size
    if offset != len(raw):
        raise IntegrityError(f"{len(raw) - offset} trailing bytes after the last blob")

    return Checkpoint(model, document.get("metadata") or {})

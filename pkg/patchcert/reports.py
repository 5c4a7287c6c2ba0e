"""
Line-delimited JSON reports and run manifests.

Every report line is one JSON object; the final line of a finished report is
``{"summary": {...}}``. Each run also writes a manifest next to its output
holding the command, the options, the seed and a git-style content hash of
the checkpoint involved.
"""

import hashlib
import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Union

import numpy as np

from patchcert import __version__

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _plain(value: Any) -> Any:
    """JSON fallback for numpy scalars/arrays, paths and tuples."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, default=_plain)


class ReportWriter:
    """Append-only JSON-lines writer; usable as a context manager."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8")
        self.count = 0

    def write(self, record: Mapping[str, Any]) -> None:
        self._handle.write(dumps(record) + "\n")
        self._handle.flush()
        self.count += 1

    __call__ = write

    def summary(self, **values: Any) -> None:
        self.write({"summary": values})

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "ReportWriter":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


def read_report(path: PathLike) -> List[Dict[str, Any]]:
    return list(iter_report(path))


def iter_report(path: PathLike) -> Iterator[Dict[str, Any]]:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield json.loads(line)


def git_blob_sha1(path: PathLike) -> str:
    """Content hash identical to ``git hash-object`` for the file."""
    data = Path(path).read_bytes()
    digest = hashlib.sha1()
    digest.update(b"blob %d\0" % len(data))
    digest.update(data)
    return digest.hexdigest()


def manifest_path(output: PathLike) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifest(
    output: PathLike,
    command: str,
    options: Mapping[str, Any],
    seed: Optional[int] = None,
    checkpoint: Optional[PathLike] = None,
    results: Optional[Mapping[str, Any]] = None,
) -> Path:
    """
    Write ``<output>.manifest.json`` describing how ``output`` was produced.

    Returns:
        Path of the manifest
    """
    manifest = {
        "command": command,
        "options": dict(options),
        "seed": seed,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "checkpoint_sha1": git_blob_sha1(checkpoint) if checkpoint else None,
        "results": dict(results or {}),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = manifest_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_plain) + "\n")
    logger.debug("wrote manifest %s", path)
    return path

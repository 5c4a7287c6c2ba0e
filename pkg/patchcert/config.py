"""
Configuration files and bundled presets.

Config files are flat ``key = value`` TOML; unquoted word values such as
``strategy = random`` are read as strings. Values layer in order: preset,
then config file, then explicit command-line flags. Unknown keys are errors.
"""

import re
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from patchcert import PRESETS_DIR
from patchcert.errors import ConfigError
from patchcert.training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Keys that describe the run rather than the optimizer
RUN_KEYS = ("dataset", "arch", "pool_groups")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "pool_stages")
KNOWN_KEYS = frozenset(RUN_KEYS + TRAIN_KEYS)

# key = word, where word is unquoted (for example strategy = random)
BARE_VALUE = re.compile(r"^(\s*[A-Za-z_][\w-]*\s*=\s*)([A-Za-z0-9][\w.+-]*)(\s*(?:#.*)?)$")


def check_keys(values: Mapping[str, Any], source: str) -> None:
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {', '.join(unknown)}")
    nested = sorted(k for k, v in values.items() if isinstance(v, dict))
    if nested:
        raise ConfigError(f"{source}: config files are flat, found tables {', '.join(nested)}")


def quote_bare_values(text: str) -> str:
    """Quote unquoted word values that TOML would reject; other lines pass through."""
    lines = []
    for line in text.splitlines():
        match = BARE_VALUE.match(line)
        if match:
            try:
                tomllib.loads(line)
            except tomllib.TOMLDecodeError:
                key, word, tail = match.groups()
                line = f'{key}"{word}"{tail}'
        lines.append(line)
    return "\n".join(lines) + "\n"


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Parse a flat key-value config file.

    Raises:
        ConfigError: Unreadable file, syntax error, nested table or unknown key
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        values = tomllib.loads(quote_bare_values(text))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    check_keys(values, str(path))
    return values


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESETS_DIR.glob("*.toml"))


def load_preset(name: str) -> Dict[str, Any]:
    path = PRESETS_DIR / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(list_presets())})")
    return load_config_file(path)


def merge(*layers: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Later layers win; None values never override."""
    merged: Dict[str, Any] = {}
    for layer in layers:
        for key, value in (layer or {}).items():
            if value is not None:
                merged[key] = value
    return merged


def parse_groups(text: str) -> Tuple[int, int]:
    """'2x2' -> (2, 2)."""
    try:
        rows, cols = (int(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"pool groups must look like GxG, got {text!r}") from exc
    if rows < 1 or cols < 1:
        raise ConfigError(f"pool groups must be positive, got {text!r}")
    return rows, cols


def train_config_from(values: Mapping[str, Any]) -> TrainConfig:
    """
    Build and validate a TrainConfig from merged values.

    Run keys (dataset, arch, pool_groups) are ignored here; pooling stages
    need the network and are attached by the caller.
    """
    check_keys(values, "configuration")
    kwargs = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    if "intensity_range" in kwargs:
        kwargs["intensity_range"] = tuple(kwargs["intensity_range"])
    config = TrainConfig(**kwargs)
    if config.strategy != "pooled":
        config.validate()
    return config


def group_list(values: Union[str, Sequence[str], None]) -> List[Tuple[int, int]]:
    if not values:
        return []
    if isinstance(values, str):
        values = [values]
    return [parse_groups(v) for v in values]

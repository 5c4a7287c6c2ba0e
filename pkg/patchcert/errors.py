"""
Exception hierarchy shared by every patchcert module.

All errors derive from PatchCertError so the CLI can report them uniformly;
most also derive from the builtin they refine so callers may catch either.
"""

from typing import Optional, Sequence


class PatchCertError(Exception):
    """Base class for all patchcert errors."""


class DimensionError(PatchCertError, ValueError):
    """Operand shapes do not compose."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ConfigError(PatchCertError, ValueError):
    """Invalid configuration value, key, or threat description."""


class FormatError(PatchCertError, ValueError):
    """A binary file does not follow its expected layout."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(PatchCertError):
    """Checkpoint payload does not match its architecture descriptor."""

    def __init__(self, message: str, layer: Optional[str] = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class NumericError(PatchCertError, ArithmeticError):
    """A non-finite value appeared during propagation."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"{message} (layer {layer_index})"
        super().__init__(message)
        self.layer_index = layer_index


class InvariantViolation(PatchCertError, ValueError):
    """An interval has a lower bound above its upper bound."""


class GraphStateError(PatchCertError, RuntimeError):
    """Backward was requested without a recorded computation graph."""


class TrainingDivergedError(PatchCertError):
    """The training loss or a certified bound became non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float, detail: Optional[str] = None):
        what = detail or f"loss diverged to {loss}"
        super().__init__(f"{what} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss

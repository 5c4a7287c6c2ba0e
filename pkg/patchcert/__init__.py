"""
Patch Certification Toolkit (patchcert)

Trains small image classifiers that are provably robust to adversarial
patches and sparse pixel attacks using interval bound propagation, certifies
them by sweeping every patch location, and attacks undefended and
preprocessing-defended models to get empirical upper bounds.
"""

__version__ = "1.0.0"
__license__ = "MIT"

from pathlib import Path

# Package root directory
PACKAGE_ROOT = Path(__file__).parent
DATA_DIR = PACKAGE_ROOT / "data"
PRESETS_DIR = DATA_DIR / "presets"
SHAPES_DIR = DATA_DIR / "shapes"

__all__ = [
    "__version__",
    "PACKAGE_ROOT",
    "DATA_DIR",
    "PRESETS_DIR",
    "SHAPES_DIR",
]

"""kfplab: numerical laboratory for degenerate Kolmogorov-Fokker-Planck operators."""

__version__ = "0.1.0"

from .geometry import (
    GroupPoint,
    ModelStructure,
    StructuralConstants,
    build_structure,
    quasi_distance,
)

__all__ = [
    "GroupPoint",
    "ModelStructure",
    "StructuralConstants",
    "build_structure",
    "quasi_distance",
    "__version__",
]

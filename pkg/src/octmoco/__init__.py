"""Motion correction for raster-scanned OCT volumes.

Two small fully-convolutional networks predict axial (Z) and coronal (X)
displacement, trained and evaluated end to end on synthetic retina
phantoms with injected ground-truth motion.
"""

from .core import (
    Boundaries,
    VesselMap,
    Volume,
    VolumeGeometry,
    XDisplacementVec,
    ZDisplacementMap,
    apply_x_displacement,
    apply_z_displacement,
    binarize,
    normalize_boundaries,
)
from .errors import DataError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "Boundaries",
    "DataError",
    "NumericalError",
    "VesselMap",
    "Volume",
    "VolumeGeometry",
    "XDisplacementVec",
    "ZDisplacementMap",
    "apply_x_displacement",
    "apply_z_displacement",
    "binarize",
    "normalize_boundaries",
]

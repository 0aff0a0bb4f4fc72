"""Volumetric data model and displacement application.

Conventions used throughout the package:

* A volume is stored as a float32 array of shape (H, W, N) indexed
  ``data[z, x, y]`` with z the depth (axial) axis, x the fast scanning
  axis within a B-scan, and y the slow scanning axis across B-scans.
* Z displacement maps are (W, N), X displacement vectors are (N,).
  Both are stored in normalized units; the pixel shift applied to the
  volume is ``int(norm_factor * value)`` with int() truncating toward
  zero.
* Boundary surfaces are (2, W, N) z-coordinates, index 0 = ILM (upper),
  index 1 = RPE (lower).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


def trunc_pixels(norm_factor, values):
    """Convert normalized displacement values to integer pixel shifts.

    The product is evaluated in float64 and truncated toward zero.
    """
    shifts = np.trunc(np.float64(norm_factor) * np.asarray(values, dtype=np.float64))
    return shifts.astype(np.int64)


@dataclass(frozen=True)
class VolumeGeometry:
    """Physical extents of a volume in millimeters (z, x, y)."""

    extent_z_mm: float = 1.9
    extent_x_mm: float = 5.8
    extent_y_mm: float = 5.8

    def __post_init__(self):
        _require(
            self.extent_z_mm > 0 and self.extent_x_mm > 0 and self.extent_y_mm > 0,
            "geometry extents must be positive",
        )


@dataclass(frozen=True)
class Volume:
    """Raster-scanned scalar volume, one A-scan per (x, y) column."""

    data: np.ndarray
    geometry: VolumeGeometry = field(default_factory=VolumeGeometry)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        _require(a.ndim == 3, "volume data must be 3-dimensional (H, W, N)")
        h, w, n = a.shape
        _require(h >= 2 and w >= 2 and n >= 2, "volume dims must all be >= 2")
        _require(np.isfinite(a).all(), "volume contains non-finite values")
        _require(a.min() >= 0.0 and a.max() <= 1.0, "volume values must lie in [0, 1]")
        object.__setattr__(self, "data", a)

    @property
    def shape(self):
        return self.data.shape

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def n_slices(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class ZDisplacementMap:
    """Per-A-scan axial displacement in normalized units, shape (W, N).

    Held in float64 so least-squares projections stay exact well below
    file precision; containers store float32.
    """

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        _require(a.ndim == 2, "Z displacement map must be 2-dimensional (W, N)")
        _require(np.isfinite(a).all(), "Z displacement map contains non-finite values")
        object.__setattr__(self, "values", a)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class XDisplacementVec:
    """Per-B-scan lateral displacement in normalized units, length N."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        _require(a.ndim == 1, "X displacement vector must be 1-dimensional (N,)")
        _require(np.isfinite(a).all(), "X displacement vector contains non-finite values")
        object.__setattr__(self, "values", a)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Boundaries:
    """Two retinal surface z-coordinates per (x, y); 0 = ILM, 1 = RPE."""

    z_of: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.z_of, dtype=np.float32)
        _require(a.ndim == 3 and a.shape[0] == 2, "boundaries must have shape (2, W, N)")
        _require(np.isfinite(a).all(), "boundaries contain non-finite values")
        _require(a.min() >= 0.0, "boundary z-coordinates must be non-negative")
        _require((a[0] <= a[1]).all(), "ILM must lie above (<=) RPE everywhere")
        object.__setattr__(self, "z_of", a)

    @property
    def ilm(self):
        return self.z_of[0]

    @property
    def rpe(self):
        return self.z_of[1]

    @property
    def shape(self):
        return self.z_of.shape


PROBABILISTIC = "probabilistic"
BINARY = "binary"


@dataclass(frozen=True)
class VesselMap:
    """En-face vessel map, shape (W, N); probability or binary values."""

    values: np.ndarray
    kind: str = PROBABILISTIC

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float32)
        _require(a.ndim == 2, "vessel map must be 2-dimensional (W, N)")
        _require(np.isfinite(a).all(), "vessel map contains non-finite values")
        _require(self.kind in (PROBABILISTIC, BINARY), f"unknown vessel map kind {self.kind!r}")
        if self.kind == BINARY:
            _require(np.isin(a, (0.0, 1.0)).all(), "binary vessel map must contain only 0/1")
        else:
            _require(a.min() >= 0.0 and a.max() <= 1.0, "vessel probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", a)

    @property
    def shape(self):
        return self.values.shape


def apply_z_displacement(v: Volume, d: ZDisplacementMap, z_norm, fill=0.0) -> Volume:
    """Shift every A-scan along z by int(z_norm * d) pixels.

    out[z, x, y] = v[z - int(z_norm * d[x, y]), x, y]; source rows that
    fall outside [0, H-1] are filled with ``fill``. Positive values move
    content toward larger z.
    """
    _require(z_norm > 0, "z_norm must be positive")
    h, w, n = v.shape
    _require(d.shape == (w, n), f"displacement dims {d.shape} do not match volume ({w}, {n})")
    shifts = trunc_pixels(z_norm, d.values)  # (W, N)

    z_idx = np.arange(h)[:, None, None]
    src = z_idx - shifts[None, :, :]  # (H, W, N)
    valid = (src >= 0) & (src < h)
    out = np.take_along_axis(v.data, np.clip(src, 0, h - 1), axis=0)
    out = np.where(valid, out, np.float32(fill))
    return Volume(out, v.geometry)


def apply_x_displacement(v: Volume, d: XDisplacementVec, x_norm, fill=0.0) -> Volume:
    """Shift every B-scan rigidly along x by int(x_norm * d) pixels.

    out[z, x, y] = v[z, x - int(x_norm * d[y]), y]; negative displacement
    shifts the B-scan left. Out-of-range columns are filled with ``fill``.
    """
    _require(x_norm > 0, "x_norm must be positive")
    h, w, n = v.shape
    _require(len(d) == n, f"displacement length {len(d)} does not match N={n}")
    shifts = trunc_pixels(x_norm, d.values)  # (N,)

    x_idx = np.arange(w)[None, :, None]
    src = x_idx - shifts[None, None, :]  # broadcast to (1, W, N)
    valid = (src >= 0) & (src < w)
    src = np.clip(src, 0, w - 1)
    out = np.take_along_axis(v.data, np.broadcast_to(src, (h, w, n)), axis=1)
    out = np.where(valid, out, np.float32(fill))
    return Volume(out, v.geometry)


def normalize_boundaries(b: Boundaries, z_norm) -> np.ndarray:
    """Return tilt-normalized boundaries B' = (T - B) / z_norm, shape (2, W, N).

    T linearly interpolates each surface between its y=0 and y=N-1 values,
    so any component of B that is affine in y cancels out.
    """
    _require(z_norm > 0, "z_norm must be positive")
    a = b.z_of.astype(np.float64)
    n = a.shape[2]
    _require(n >= 2, "need at least 2 B-scans")
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    tilt = a[:, :, :1] + (a[:, :, -1:] - a[:, :, :1]) * ramp[None, None, :]
    return ((tilt - a) / float(z_norm)).astype(np.float32)


def binarize(m: VesselMap, threshold=0.5) -> VesselMap:
    """Threshold a probability map into a binary map; out = 1 iff value >= threshold."""
    _require(0.0 <= threshold <= 1.0, "threshold must lie in [0, 1]")
    return VesselMap((m.values >= threshold).astype(np.float32), kind=BINARY)

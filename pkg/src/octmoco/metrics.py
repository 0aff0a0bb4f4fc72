"""Evaluation metrics: displacement MAE, volume correlation, curvature
and distortion indices, and binary Dice overlap."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import linalg
from .core import BINARY, Boundaries, VesselMap, Volume, VolumeGeometry, _require
from .errors import NumericalError

AXIS_X = "x"
AXIS_Y = "y"


@dataclass(frozen=True)
class MetricsReport:
    """Flat bundle of evaluation metrics; absent metrics stay None."""

    mae_z: float | None = None
    mae_x: float | None = None
    pcc: float | None = None
    curv_x: float | None = None
    curv_y: float | None = None
    dist_x: float | None = None
    dist_y: float | None = None
    dist_xy: float | None = None
    dice: float | None = None

    def __post_init__(self):
        if self.pcc is not None:
            _require(-1.0 - 1e-9 <= self.pcc <= 1.0 + 1e-9, "pcc out of [-1, 1]")
        if self.dice is not None:
            _require(0.0 <= self.dice <= 1.0, "dice out of [0, 1]")
        for c in (self.curv_x, self.curv_y):
            if c is not None:
                _require(c >= 1.0 - 1e-6, "curvature index below 1")
        for d in (self.dist_x, self.dist_y, self.dist_xy, self.mae_z, self.mae_x):
            if d is not None:
                _require(d >= 0.0, "distances must be >= 0")

    def to_dict(self):
        return asdict(self)


def mae_z(d, d_gt, z_norm):
    """Mean absolute axial displacement error in pixels."""
    a = np.asarray(getattr(d, "values", d), dtype=np.float64)
    b = np.asarray(getattr(d_gt, "values", d_gt), dtype=np.float64)
    _require(a.shape == b.shape, "displacement shapes differ")
    return float(z_norm * np.mean(np.abs(a - b)))


def mae_x(d, d_gt, x_norm):
    """Mean absolute lateral displacement error in pixels."""
    a = np.asarray(getattr(d, "values", d), dtype=np.float64)
    b = np.asarray(getattr(d_gt, "values", d_gt), dtype=np.float64)
    _require(a.shape == b.shape, "displacement shapes differ")
    return float(x_norm * np.mean(np.abs(a - b)))


def pcc(a, b):
    """Pearson correlation over all voxels, two-pass in double precision."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    y = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    _require(x.shape == y.shape, "volume shapes differ")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.mean(xc**2))
    sy = np.sqrt(np.mean(yc**2))
    if sx == 0.0 or sy == 0.0:
        raise NumericalError("PCC undefined: an input volume has zero variance")
    return float(np.mean(xc * yc) / (sx * sy))


def curvature_index(b: Boundaries, axis, geometry: VolumeGeometry, height, h_ref=300.0):
    """Arc-length-to-chord ratio of the fitted central RPE curve.

    Tilt is corrected first (corner-based leveling); the central B-scan
    (axis "x", at y = N//2) or central cross-section (axis "y", at
    x = W//2) of the RPE is then fit with a quartic and measured in
    physical millimeters. Returns (curv, Poly4). 1.0 means flat.
    """
    _require(axis in (AXIS_X, AXIS_Y), f"axis must be 'x' or 'y', got {axis!r}")
    _require(height >= 2, "volume height must be >= 2")
    tilt = linalg.tilt_displacement(b, h_ref=h_ref).values.astype(np.float64)
    rpe = b.rpe.astype(np.float64) + tilt
    w, n = rpe.shape
    if axis == AXIS_X:
        samples = rpe[:, n // 2]
        h_scale = geometry.extent_x_mm / w
    else:
        samples = rpe[w // 2, :]
        h_scale = geometry.extent_y_mm / n
    _require(samples.size >= 5, "central RPE section too short for a quartic fit")
    z_scale = geometry.extent_z_mm / height
    poly = linalg.poly4_fit(samples)
    k_max = samples.size - 1
    arc = linalg.poly_arclength(poly, k_max, z_scale, h_scale)
    chord = float(np.hypot(h_scale * k_max, z_scale * (poly(k_max) - poly(0.0))))
    if chord == 0.0:
        raise NumericalError("degenerate RPE section: zero chord length")
    return arc / chord, poly


def distortion(curv_pred, curv_gt_same_axis, curv_x_gt):
    """(|pred - gt on same axis|, |pred - gt X curvature|)."""
    return abs(curv_pred - curv_gt_same_axis), abs(curv_pred - curv_x_gt)


def dice_binary(s1: VesselMap, s2: VesselMap):
    """Dice overlap of two binary maps; two empty maps count as perfect."""
    _require(s1.kind == BINARY and s2.kind == BINARY, "dice_binary needs binary maps")
    _require(s1.shape == s2.shape, "map shapes differ")
    a = s1.values.astype(np.float64)
    b = s2.values.astype(np.float64)
    denom = a.sum() + b.sum()
    if denom == 0.0:
        return 1.0
    return float(2.0 * (a * b).sum() / denom)

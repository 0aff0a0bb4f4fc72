"""Closed-form least-squares utilities.

Per-B-scan line projection of displacement maps, quartic boundary
fitting, polyline arc length of fitted curves, and corner-based tilt
correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Boundaries, ZDisplacementMap, _require


@dataclass(frozen=True)
class LineFit:
    """Per-B-scan line parameters: beta[0] = slope, beta[1] = intercept; shape (2, N)."""

    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.beta, dtype=np.float64)
        _require(a.ndim == 2 and a.shape[0] == 2, "beta must have shape (2, N)")
        _require(np.isfinite(a).all(), "beta contains non-finite values")
        object.__setattr__(self, "beta", a)


@dataclass(frozen=True)
class Poly4:
    """Quartic polynomial coefficients in ascending degree (5 values)."""

    coeffs: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.coeffs, dtype=np.float64)
        _require(a.shape == (5,), "Poly4 needs exactly 5 coefficients")
        _require(np.isfinite(a).all(), "coefficients contain non-finite values")
        object.__setattr__(self, "coeffs", a)

    def __call__(self, k):
        return np.polynomial.polynomial.polyval(np.asarray(k, dtype=np.float64), self.coeffs)


def coordinate_matrix(w):
    """The (W, 2) matrix [[0..W-1], [1..1]]^T used by the per-B-scan line fit."""
    x = np.empty((w, 2), dtype=np.float64)
    x[:, 0] = np.arange(w)
    x[:, 1] = 1.0
    return x


def line_fit(d: ZDisplacementMap) -> LineFit:
    """Least-squares line through each B-scan column of the displacement map."""
    w, n = d.shape
    _require(w >= 2, "need at least 2 A-scan positions per B-scan")
    x = coordinate_matrix(w)
    # beta(y) = (X^T X)^-1 X^T d(y), all y at once
    gram_inv = np.linalg.inv(x.T @ x)
    beta = gram_inv @ (x.T @ d.values.astype(np.float64))
    return LineFit(beta)


def ls_line_project(d: ZDisplacementMap) -> ZDisplacementMap:
    """Project each B-scan's displacements onto the best-fit line in x.

    Idempotent; the residual d - project(d) is orthogonal to [x, 1].
    """
    w, _ = d.shape
    x = coordinate_matrix(w)
    beta = line_fit(d).beta
    return ZDisplacementMap(x @ beta)


def projection_matrix(w):
    """The (W, W) hat matrix X (X^T X)^-1 X^T of the per-B-scan line fit."""
    x = coordinate_matrix(w)
    return x @ np.linalg.inv(x.T @ x) @ x.T


def poly4_fit(samples) -> Poly4:
    """Least-squares quartic through (k, samples[k]) for k = 0..K-1.

    Abscissae are rescaled to [0, 1] before solving so the fit stays
    well-conditioned for K up to a few thousand; coefficients are mapped
    back to the raw pixel abscissa.
    """
    z = np.asarray(samples, dtype=np.float64)
    _require(z.ndim == 1, "samples must be 1-dimensional")
    k = z.shape[0]
    _require(k >= 5, f"need at least 5 samples for a quartic fit, got {k}")
    _require(np.isfinite(z).all(), "samples contain non-finite values")
    t = np.arange(k, dtype=np.float64) / (k - 1)
    vand = np.vander(t, 5, increasing=True)
    coeffs_t, *_ = np.linalg.lstsq(vand, z, rcond=None)
    scale = (k - 1.0) ** np.arange(5)
    return Poly4(coeffs_t / scale)


def poly_arclength(p: Poly4, k_max, z_scale, h_scale, supersample=8):
    """Arc length (mm) of the scaled curve (h_scale*k, z_scale*p(k)), k in [0, k_max].

    Computed as a dense polyline sum with ``supersample`` points per unit
    abscissa step; accurate to ~1e-4 relative for smooth quartics.
    """
    _require(k_max >= 1, "k_max must be >= 1")
    m = int(k_max * supersample) + 1
    k = np.linspace(0.0, float(k_max), m)
    xs = h_scale * k
    zs = z_scale * p(k)
    return float(np.sum(np.hypot(np.diff(xs), np.diff(zs))))


def tilt_displacement(b: Boundaries, h_ref=300.0) -> ZDisplacementMap:
    """Pixel displacement leveling the four RPE corners to height h_ref.

    D(x, y) = h_ref - bilinear interpolation of the four corner RPE
    z-coordinates; applying it maps each corner exactly to h_ref. Values
    are raw pixels (apply with norm factor 1).
    """
    rpe = b.rpe.astype(np.float64)
    w, n = rpe.shape
    x = np.arange(w, dtype=np.float64)[:, None]
    y = np.arange(n, dtype=np.float64)[None, :]
    c00, cw0 = rpe[0, 0], rpe[-1, 0]
    c0n, cwn = rpe[0, -1], rpe[-1, -1]
    interp = (
        c00 * (w - 1 - x) * (n - 1 - y)
        + cw0 * x * (n - 1 - y)
        + c0n * (w - 1 - x) * y
        + cwn * x * y
    ) / ((w - 1) * (n - 1))
    return ZDisplacementMap(h_ref - interp)

"""Synthetic retina phantoms and ground-truth motion injection.

Phantoms are smooth curved layer stacks with dark vessel tubes below the
ILM; motion is injected as an integer-quantized axial map (random-walk
component per B-scan plus an x-ramp tilt) and integer per-B-scan lateral
shifts. The returned ground-truth displacement maps undo the injected
motion exactly on the unclipped interior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Boundaries,
    BINARY,
    VesselMap,
    Volume,
    VolumeGeometry,
    XDisplacementVec,
    ZDisplacementMap,
    _require,
    apply_x_displacement,
    apply_z_displacement,
    trunc_pixels,
)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 128, 24)  # (H, W, N)
    layer_count: int = 4
    curvature_px: float = 5.0
    vessel_count: int = 6
    vessel_width_px: float = 3.0
    noise_level: float = 0.1
    seed: int = 0
    geometry: VolumeGeometry = field(default_factory=VolumeGeometry)

    def __post_init__(self):
        h, w, n = self.dims
        _require(h >= 16 and w >= 16 and n >= 8, "phantom dims must be at least (16, 16, 8)")
        _require(0.0 <= self.noise_level < 1.0, "noise level must lie in [0, 1)")
        _require(self.layer_count >= 1, "need at least one layer")
        _require(self.vessel_count >= 0 and self.vessel_width_px > 0, "bad vessel settings")
        _require(self.curvature_px >= 0, "curvature amplitude must be >= 0")


@dataclass(frozen=True)
class MotionSample:
    """Injected motion: axial walk + tilt ramp plus lateral B-scan shifts.

    delta_total(x, y) = delta_y(y) + delta_x(x) by construction (rank-2).
    """

    delta_y: np.ndarray  # (N,) px, endpoints zero
    delta_x: np.ndarray  # (W,) px, ramp from 0
    x_shift: np.ndarray  # (N,) integer px
    delta_total: np.ndarray = None  # (W, N) px

    def __post_init__(self):
        dy = np.asarray(self.delta_y, dtype=np.float64)
        dx = np.asarray(self.delta_x, dtype=np.float64)
        xs = np.asarray(self.x_shift)
        _require(dy.ndim == 1 and dx.ndim == 1 and xs.ndim == 1, "motion components must be 1-d")
        _require(dy[0] == 0.0 and dy[-1] == 0.0, "delta_y endpoints must be zero")
        _require(np.all(xs == np.round(xs)), "x_shift must be integer-valued")
        object.__setattr__(self, "delta_y", dy)
        object.__setattr__(self, "delta_x", dx)
        object.__setattr__(self, "x_shift", xs.astype(np.int64))
        object.__setattr__(self, "delta_total", dx[:, None] + dy[None, :])


def detilted_walk(g):
    """Cumulative sum of g[1:] with its end-to-end tilt removed.

    out[k] = sum(g[1..k]) - k/(N-1) * sum(g[1..N-1]); both endpoints are
    exactly zero.
    """
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[0]
    _require(n >= 2, "need at least 2 entries")
    walk = np.concatenate([[0.0], np.cumsum(g[1:])])  # walk[k] = sum(g[1..k])
    ks = np.arange(n, dtype=np.float64)
    return walk - (ks / (n - 1)) * walk[-1]


def sample_axial_motion(seed, n, w, sigma_y=1.0, sigma_x=1.0) -> MotionSample:
    """Draw the axial augmentation: a de-tilted Gaussian random walk over
    the slow axis plus a linear ramp over the fast axis.

    delta_y is the detilted cumulative sum of g ~ N(0, sigma_y^2)^N, so
    delta_y(0) = delta_y(N-1) = 0; delta_x ramps from 0 to a single
    N(0, sigma_x^2) draw.
    """
    _require(n >= 2 and w >= 2, "need N >= 2 and W >= 2")
    rng = np.random.default_rng(seed)
    g = rng.normal(0.0, sigma_y, size=n)
    delta_y = detilted_walk(g)
    ramp_end = rng.normal(0.0, sigma_x)
    delta_x = ramp_end * np.arange(w, dtype=np.float64) / (w - 1)
    return MotionSample(delta_y=delta_y, delta_x=delta_x, x_shift=np.zeros(n, dtype=np.int64))


def _laplace_scale_for_mean(mean_abs, max_abs):
    """Scale b such that E|clip(round(Laplace(0, b)), max_abs)| == mean_abs.

    The expectation reduces to sum_{k=1..m} exp(-(k - 1/2)/b), monotone in
    b, so plain bisection suffices.
    """
    m = int(max_abs)

    def expected(b):
        k = np.arange(1, m + 1)
        return float(np.sum(np.exp(-(k - 0.5) / b)))

    lo, hi = 1e-3, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected(mid) < mean_abs:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_x_motion(seed, n, mean_abs=0.96, max_abs=5):
    """Integer per-B-scan lateral shifts with E|shift| ~= mean_abs, |shift| <= max_abs.

    Shifts are a discretized zero-mean Laplace clipped to +-max_abs, with
    the scale calibrated analytically so the expected magnitude matches.
    """
    rng = np.random.default_rng(seed)
    if max_abs == 0:
        return np.zeros(n, dtype=np.int64)
    _require(0 < mean_abs <= max_abs, "need 0 < mean_abs <= max_abs")
    if mean_abs == max_abs:
        # degenerate: every shift at the cap, random sign
        return (max_abs * rng.choice([-1, 1], size=n)).astype(np.int64)
    b = _laplace_scale_for_mean(mean_abs, max_abs)
    raw = rng.laplace(0.0, b, size=n)
    return np.clip(np.rint(raw), -max_abs, max_abs).astype(np.int64)


def _smooth_field(rng, w, n, amplitude, modes=2):
    """Low-frequency random cosine mixture over the en-face grid."""
    u = np.linspace(-1.0, 1.0, w)[:, None]
    v = np.linspace(-1.0, 1.0, n)[None, :]
    out = np.zeros((w, n))
    for _ in range(modes):
        fx, fy = rng.uniform(0.3, 1.2, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.normal(0, 1.0) * np.cos(np.pi * (fx * u + fy * v) + phase)
    peak = np.abs(out).max()
    if peak > 0:
        out *= amplitude / peak
    return out


def generate_phantom(cfg: PhantomConfig):
    """Build one phantom; returns (Volume, Boundaries, VesselMap).

    Deterministic per seed. With curvature_px == 0 the RPE is exactly
    planar; with vessel_count == 0 the vessel map is all zeros.
    """
    h, w, n = cfg.dims
    rng = np.random.default_rng(cfg.seed)

    u = np.linspace(-1.0, 1.0, w)[:, None]
    v = np.linspace(-1.0, 1.0, n)[None, :]

    # RPE: quadratic bowl (deeper at the edges) plus gentle smooth noise
    # that scales with the bowl so amplitude 0 keeps the surface planar.
    rpe_center = 0.60 * h
    rpe = rpe_center + 0.5 * cfg.curvature_px * (u**2 + v**2)
    rpe = rpe + _smooth_field(rng, w, n, 0.05 * cfg.curvature_px)

    thickness = 0.30 * h * (1.0 - 0.06 * (u**2 + v**2))
    ilm = rpe - thickness

    # vessel centerlines wander along the slow axis
    vessel_mask = np.zeros((w, n), dtype=bool)
    x_grid = np.arange(w, dtype=np.float64)[:, None]
    y_rel = np.arange(n, dtype=np.float64)[None, :] / (n - 1)
    for _ in range(cfg.vessel_count):
        center = rng.uniform(0.12 * w, 0.88 * w)
        amp = rng.uniform(0.01 * w, 0.05 * w)
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        slope = rng.uniform(-0.04 * w, 0.04 * w)
        path = center + amp * np.sin(2 * np.pi * freq * y_rel + phase) + slope * (y_rel - 0.5)
        vessel_mask |= np.abs(x_grid - path) <= cfg.vessel_width_px / 2.0

    z = np.arange(h, dtype=np.float64)[:, None, None]
    ilm3 = ilm[None, :, :]
    rpe3 = rpe[None, :, :]

    # soft 1-px transitions at the surfaces
    above = np.clip(z - ilm3 + 0.5, 0.0, 1.0)  # 0 above ILM, 1 below
    inside = above * np.clip(rpe3 - z + 0.5, 0.0, 1.0)

    depth = np.clip((z - ilm3) / np.maximum(rpe3 - ilm3, 1e-6), 0.0, 1.0)
    bands = 0.55 + 0.30 * np.cos(np.pi * cfg.layer_count * depth) ** 2
    tissue = inside * bands

    rpe_line = 0.95 * np.exp(-0.5 * ((z - rpe3) / 1.0) ** 2)
    below = np.clip(z - rpe3, 0.0, None)
    tail = 0.22 * np.exp(-below / 6.0) * (z > rpe3)

    img = np.maximum.reduce([tissue, rpe_line, tail]) + 0.04

    # vessels shadow everything beneath the ILM
    shadow = np.where(vessel_mask[None, :, :] & (z > ilm3 + 1.0), 0.35, 1.0)
    img = img * shadow

    if cfg.noise_level > 0:
        img = img + rng.normal(0.0, 0.12 * cfg.noise_level, size=img.shape)

    volume = Volume(np.clip(img, 0.0, 1.0).astype(np.float32), cfg.geometry)
    bounds = Boundaries(np.stack([ilm, rpe]).astype(np.float32))
    vessels = VesselMap(vessel_mask.astype(np.float32), kind=BINARY)
    return volume, bounds, vessels


def exact_normalized(shifts, norm_factor):
    """float32 values v with trunc(norm_factor * v) == shifts exactly.

    k / norm rounded to float32 can land just below k / norm, in which
    case truncation toward zero loses a pixel; nudge such values one ulp
    away from zero until the round trip is exact.
    """
    k = np.asarray(shifts, dtype=np.int64)
    vals = (k / float(norm_factor)).astype(np.float32)
    target = np.where(k >= 0, np.float32(np.inf), np.float32(-np.inf))
    for _ in range(4):
        bad = trunc_pixels(norm_factor, vals) != k
        if not bad.any():
            return vals
        vals = np.where(bad, np.nextafter(vals, target), vals)
    raise AssertionError("could not make normalized displacement round-trip exactly")


def _gather_x_edge(arr, shifts):
    """Gather arr[..., x - shift(y), y] along the W axis, clamping at the edges."""
    w = arr.shape[-2]
    src = np.arange(w)[:, None] - shifts[None, :]
    src = np.clip(src, 0, w - 1)
    return np.take_along_axis(arr, np.broadcast_to(src, arr.shape[:-2] + src.shape), axis=-2)


def shift_mask_x(mask, shifts):
    """Shift a (W, N) map by integer pixels per B-scan; vacated columns get 0."""
    w, n = mask.shape
    src = np.arange(w)[:, None] - np.asarray(shifts, dtype=np.int64)[None, :]
    valid = (src >= 0) & (src < w)
    out = np.take_along_axis(mask, np.clip(src, 0, w - 1), axis=0)
    return np.where(valid, out, 0).astype(mask.dtype)


def inject_motion(v: Volume, b: Boundaries, m: MotionSample, z_norm, x_norm):
    """Corrupt a phantom with integer-quantized motion.

    Returns (volume, boundaries, gt_z, gt_x) where the ground-truth maps,
    fed through apply_z_displacement / apply_x_displacement, undo the
    injected motion on the unclipped interior. The axial ground truth
    carries only the random-walk component; the x-ramp tilt is excluded
    from the target and left to tilt correction.
    """
    h, w, n = v.shape
    _require(m.delta_y.shape[0] == n and m.delta_x.shape[0] == w and m.x_shift.shape[0] == n,
             "motion sample dims do not match volume")
    qy = np.rint(m.delta_y).astype(np.int64)
    qx = np.rint(m.delta_x).astype(np.int64)
    xs = m.x_shift
    dz = qx[:, None] + qy[None, :]  # (W, N)

    shifted = apply_x_displacement(v, XDisplacementVec(xs.astype(np.float32)), x_norm=1.0)
    corrupted = apply_z_displacement(shifted, ZDisplacementMap(dz.astype(np.float32)), z_norm=1.0)

    bz = _gather_x_edge(b.z_of.astype(np.float64), xs) + dz[None, :, :]
    bz = np.clip(bz, 0.0, h - 1.0)
    bz[0] = np.minimum(bz[0], bz[1])
    corrupted_b = Boundaries(bz.astype(np.float32))

    gt_z = np.broadcast_to(exact_normalized(-qy, z_norm)[None, :], (w, n)).copy()
    gt_x = exact_normalized(-xs, x_norm)
    return corrupted, corrupted_b, ZDisplacementMap(gt_z), XDisplacementVec(gt_x)


_FLIP_AXES = {"x": 1, "y": 2}


def flip_augment(v: Volume, b: Boundaries, gt_z: ZDisplacementMap, axis):
    """Mirror volume, boundaries, and displacement map along a spatial axis.

    Displacement values are unchanged, only re-indexed; flipping twice is
    the identity.
    """
    ax = _FLIP_AXES.get(str(axis).lower())
    _require(ax is not None, f"axis must be 'x' or 'y', got {axis!r}")
    data = np.flip(v.data, axis=ax).copy()
    bz = np.flip(b.z_of, axis=ax).copy()
    d = np.flip(gt_z.values, axis=ax - 1).copy()
    return Volume(data, v.geometry), Boundaries(bz), ZDisplacementMap(d)


@dataclass(frozen=True)
class PhantomSample:
    """One training/evaluation sample: a corrupted phantom plus its truth."""

    seed: int
    volume: Volume
    boundaries: Boundaries
    volume_clean: Volume
    boundaries_clean: Boundaries
    vessels: VesselMap
    gt_z: ZDisplacementMap
    gt_x: XDisplacementVec


def simulate_sample(cfg: PhantomConfig, z_norm, x_norm, sigma_y=1.0, sigma_x=1.0,
                    x_mean_abs=0.96, x_max_abs=5) -> PhantomSample:
    """Generate a phantom, draw motion, and inject it; fully seed-driven."""
    volume, bounds, vessels = generate_phantom(cfg)
    h, w, n = volume.shape
    axial = sample_axial_motion(cfg.seed + 1, n, w, sigma_y=sigma_y, sigma_x=sigma_x)
    xs = sample_x_motion(cfg.seed + 2, n, mean_abs=x_mean_abs, max_abs=x_max_abs) \
        if x_max_abs > 0 else np.zeros(n, dtype=np.int64)
    motion = MotionSample(delta_y=axial.delta_y, delta_x=axial.delta_x, x_shift=xs)
    corrupted, corrupted_b, gt_z, gt_x = inject_motion(volume, bounds, motion, z_norm, x_norm)
    return PhantomSample(
        seed=cfg.seed,
        volume=corrupted,
        boundaries=corrupted_b,
        volume_clean=volume,
        boundaries_clean=bounds,
        vessels=vessels,
        gt_z=gt_z,
        gt_x=gt_x,
    )

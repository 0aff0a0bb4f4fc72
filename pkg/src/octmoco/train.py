"""Losses, gradient checking, and the three-stage training loop.

Stages run in the order z -> vessel -> x; the x stage consumes a frozen
vessel checkpoint. All losses operate on torch tensors shaped (W, N) /
(N,) or with leading batch dims; training selects the parameters with
the lowest validation loss and records a per-epoch history.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import linalg
from .core import Volume, Boundaries, _require, normalize_boundaries, trunc_pixels
from .errors import NumericalError
from .networks import (
    ARCH_VESSEL,
    ARCH_X,
    ARCH_Z,
    ModelParams,
    NetConfig,
    VesselNet,
    XNet,
    ZNet,
    init_parameters,
)
from .simulate import (
    MotionSample,
    PhantomSample,
    flip_augment,
    inject_motion,
    sample_axial_motion,
    shift_mask_x,
)

STAGE_Z = "z"
STAGE_VESSEL = "vessel"
STAGE_X = "x"
STAGES = (STAGE_Z, STAGE_VESSEL, STAGE_X)


@dataclass(frozen=True)
class TrainConfig:
    lambda_disp: float = 1.0
    lambda_smooth: float = 0.5
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lr_z: float = 1e-3
    lr_vessel: float = 1e-3
    lr_x: float = 1e-4
    decay_z: float = 0.995
    decay_vessel: float = 0.99
    decay_x: float = 1.0
    weight_decay: float = 1e-3
    batch_size: int = 4
    epochs_z: int = 500
    epochs_vessel: int = 500
    epochs_x: int = 1000
    z_norm: float = 10.0
    x_norm: float = 1.0
    seed: int = 0
    augment: bool = True
    aug_sigma_y: float = 1.0
    aug_sigma_x: float = 1.0

    def __post_init__(self):
        _require(min(self.lambda_disp, self.lambda_smooth, self.lambda_bce, self.lambda_dice) >= 0,
                 "loss weights must be >= 0")
        _require(min(self.lr_z, self.lr_vessel, self.lr_x) >= 0, "learning rates must be >= 0")
        _require(self.batch_size >= 1, "batch size must be >= 1")
        _require(self.z_norm > 0 and self.x_norm > 0, "norm factors must be positive")

    def lr_for(self, stage):
        return {STAGE_Z: self.lr_z, STAGE_VESSEL: self.lr_vessel, STAGE_X: self.lr_x}[stage]

    def decay_for(self, stage):
        return {STAGE_Z: self.decay_z, STAGE_VESSEL: self.decay_vessel, STAGE_X: self.decay_x}[stage]

    def epochs_for(self, stage):
        return {STAGE_Z: self.epochs_z, STAGE_VESSEL: self.epochs_vessel, STAGE_X: self.epochs_x}[stage]


@dataclass(frozen=True)
class CenterMask:
    """Spatial loss weights in [0.2, 1], peaking at the scan center."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        _require(a.ndim == 2, "mask must be 2-dimensional")
        _require(a.min() > 0 and a.max() <= 1.0, "mask values must lie in (0, 1]")
        object.__setattr__(self, "values", a)


def center_mask(w, n) -> CenterMask:
    """0.2 + 0.8 * hann(x/(W-1)) * hann(y/(N-1)) with hann(t) = sin^2(pi t)."""
    _require(w >= 2 and n >= 2, "mask needs W, N >= 2")
    hx = np.sin(np.pi * np.arange(w) / (w - 1)) ** 2
    hy = np.sin(np.pi * np.arange(n) / (n - 1)) ** 2
    return CenterMask(0.2 + 0.8 * hx[:, None] * hy[None, :])


def _as_tensor(a, like=None):
    if isinstance(a, CenterMask):
        a = a.values
    if isinstance(a, torch.Tensor):
        t = a
    else:
        t = torch.as_tensor(np.asarray(a))
    if like is not None:
        t = t.to(like.dtype)
    return t


_PROJ_CACHE = {}


def line_projection(d):
    """Project (..., W, N) displacements onto per-B-scan lines in x (torch)."""
    w = d.shape[-2]
    key = (w, d.dtype)
    if key not in _PROJ_CACHE:
        _PROJ_CACHE[key] = torch.from_numpy(linalg.projection_matrix(w)).to(d.dtype)
    p = _PROJ_CACHE[key]
    return torch.einsum("vw,...wn->...vn", p, d)


def loss_disp(d, d_gt, m) -> torch.Tensor:
    """Center-weighted L1: mean(m * |d - d_gt|) over every entry."""
    d = _as_tensor(d)
    d_gt = _as_tensor(d_gt, like=d)
    _require(d.shape == d_gt.shape, "displacement shapes differ")
    return (_as_tensor(m, like=d) * (d - d_gt).abs()).mean()


def loss_smooth(d, d_proj) -> torch.Tensor:
    """Mean L1 deviation from the per-B-scan least-squares line."""
    d = _as_tensor(d)
    d_proj = _as_tensor(d_proj, like=d)
    _require(d.shape == d_proj.shape, "displacement shapes differ")
    return (d - d_proj).abs().mean()


def loss_total_z(d, d_gt, m, cfg: TrainConfig) -> torch.Tensor:
    """lambda_disp * masked L1 + lambda_smooth * line-fit deviation.

    The projection target is detached: gradients flow through the raw
    displacement only.
    """
    d = _as_tensor(d)
    proj = line_projection(d).detach()
    return cfg.lambda_disp * loss_disp(d, d_gt, m) + cfg.lambda_smooth * loss_smooth(d, proj)


def loss_bce(logits, s_gt) -> torch.Tensor:
    """Binary cross-entropy on logits, log-sum-exp form: mean(softplus(l) - s*l)."""
    logits = _as_tensor(logits)
    s_gt = _as_tensor(s_gt, like=logits)
    return (F.softplus(logits) - s_gt * logits).mean()


def loss_soft_dice(probs, s_gt, eps=1e-7) -> torch.Tensor:
    """1 - 2*sum(p*s) / (sum(p) + sum(s) + eps), averaged over leading dims."""
    probs = _as_tensor(probs)
    s_gt = _as_tensor(s_gt, like=probs)
    inter = (probs * s_gt).sum(dim=(-2, -1))
    denom = probs.sum(dim=(-2, -1)) + s_gt.sum(dim=(-2, -1))
    return (1.0 - 2.0 * inter / (denom + eps)).mean()


def loss_vessel(logits, s_gt, cfg: TrainConfig) -> torch.Tensor:
    logits = _as_tensor(logits)
    return cfg.lambda_bce * loss_bce(logits, s_gt) + \
        cfg.lambda_dice * loss_soft_dice(torch.sigmoid(logits), s_gt)


def loss_xdisp(d, d_gt_px, x_norm) -> torch.Tensor:
    """MSE between x_norm-scaled prediction and pixel-unit ground truth."""
    d = _as_tensor(d)
    d_gt_px = _as_tensor(d_gt_px, like=d)
    _require(d.shape == d_gt_px.shape, "displacement shapes differ")
    return ((x_norm * d - d_gt_px) ** 2).mean()


def grad_check(model, loss_fn, sample, eps=1e-3, n_params=64, seed=0):
    """Max relative error between autodiff and central-difference gradients.

    Samples >= n_params coordinates uniformly across all parameters; the
    model is evaluated in double precision with dropout disabled.
    """
    model = model.double().eval()
    params = [p for p in model.parameters()]
    loss = loss_fn(model, sample)
    model.zero_grad()
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    with torch.no_grad():
        for flat_idx in picks:
            pi = int(np.searchsorted(bounds, flat_idx, side="right"))
            local = int(flat_idx - (bounds[pi - 1] if pi > 0 else 0))
            p = params[pi].view(-1)
            orig = p[local].item()
            p[local] = orig + eps
            lp = float(loss_fn(model, sample))
            p[local] = orig - eps
            lm = float(loss_fn(model, sample))
            p[local] = orig
            fd = (lp - lm) / (2 * eps)
            an = float(grads[pi].view(-1)[local])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# batch assembly


def _augment_z_sample(s: PhantomSample, cfg: TrainConfig, rng):
    v, b, gt = s.volume, s.boundaries, s.gt_z
    if rng.random() < 0.5:
        v, b, gt = flip_augment(v, b, gt, "x")
    if rng.random() < 0.5:
        v, b, gt = flip_augment(v, b, gt, "y")
    h, w, n = v.shape
    fresh = sample_axial_motion(int(rng.integers(2**62)), n, w,
                                sigma_y=cfg.aug_sigma_y, sigma_x=cfg.aug_sigma_x)
    v2, b2, extra_gt, _ = inject_motion(v, b, fresh, cfg.z_norm, cfg.x_norm)
    gt = gt.values + extra_gt.values
    return v2, b2, gt


def _z_batch(samples, cfg: TrainConfig, net_cfg: NetConfig, rng=None):
    vols, bnorms, targets = [], [], []
    for s in samples:
        if rng is not None:
            v, b, gt = _augment_z_sample(s, cfg, rng)
        else:
            v, b, gt = s.volume, s.boundaries, s.gt_z.values
        vols.append(v.data)
        targets.append(np.asarray(gt, dtype=np.float32))
        if net_cfg.use_segmentation_input:
            bnorms.append(normalize_boundaries(b, cfg.z_norm))
    x = torch.from_numpy(np.stack(vols))
    t = torch.from_numpy(np.stack(targets))[:, None]
    bn = torch.from_numpy(np.stack(bnorms)) if bnorms else None
    return x, bn, t


def observed_vessel_mask(s: PhantomSample, x_norm):
    """The phantom vessel mask as it appears in the corrupted volume."""
    injected = -trunc_pixels(x_norm, s.gt_x.values)
    return shift_mask_x(s.vessels.values, injected)


def _vessel_batch(samples, cfg: TrainConfig):
    x = torch.from_numpy(np.stack([s.volume.data for s in samples]))
    t = torch.from_numpy(np.stack([observed_vessel_mask(s, cfg.x_norm) for s in samples]))[:, None]
    return x, t


def _precompute_vessel_probs(samples, vessel_model):
    vessel_model.eval()
    out = []
    with torch.no_grad():
        for s in samples:
            logits = vessel_model(torch.from_numpy(s.volume.data)[None])
            out.append(torch.sigmoid(logits)[0])
    return out


def _x_targets_px(samples, x_norm):
    return torch.from_numpy(np.stack(
        [trunc_pixels(x_norm, s.gt_x.values).astype(np.float32) for s in samples]))


# ---------------------------------------------------------------------------
# training loop


def _stage_losses(stage, model, batch, cfg, mask_t, rng=None):
    if stage == STAGE_Z:
        x, bn, t = batch
        pred = model(x, bnorm=bn, rng=rng)
        return loss_total_z(pred, t, mask_t, cfg)
    if stage == STAGE_VESSEL:
        x, t = batch
        logits = model(x, rng=rng)
        return loss_vessel(logits, t, cfg)
    x, t = batch
    pred = model(x, rng=rng)
    return loss_xdisp(pred, t, cfg.x_norm)


def train_stage(stage, datasets, cfg: TrainConfig, net_cfg: NetConfig,
                vessel=None, seed=None, log=None):
    """Train one stage; returns (best ModelParams, history).

    datasets maps "train"/"val" to lists of PhantomSample. Stage "x"
    needs ``vessel``: a (NetConfig, ModelParams) pair for the frozen
    vessel segmentation net. Deterministic per seed.
    """
    _require(stage in STAGES, f"unknown stage {stage!r}")
    train_set = datasets["train"]
    val_set = datasets["val"]
    _require(len(train_set) > 0 and len(val_set) > 0, "empty dataset")
    if stage == STAGE_X:
        _require(vessel is not None, "stage x requires a frozen vessel checkpoint")

    seed = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    init_seed, shuffle_seed, drop_seed, aug_seed = (int(v) for v in ss.generate_state(4))

    model_cls = {STAGE_Z: ZNet, STAGE_VESSEL: VesselNet, STAGE_X: XNet}[stage]
    model = init_parameters(model_cls(net_cfg), init_seed)
    shuffle_g = torch.Generator().manual_seed(shuffle_seed)
    drop_g = torch.Generator().manual_seed(drop_seed)

    if stage == STAGE_X:
        vessel_cfg, vessel_params = vessel
        vessel_model = vessel_params.load_into(VesselNet(vessel_cfg))
        train_probs = _precompute_vessel_probs(train_set, vessel_model)
        val_probs = _precompute_vessel_probs(val_set, vessel_model)
        train_t = _x_targets_px(train_set, cfg.x_norm)
        val_t = _x_targets_px(val_set, cfg.x_norm)

    sample_shape = train_set[0].gt_z.shape
    mask_t = torch.from_numpy(center_mask(*sample_shape).values.astype(np.float32))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_for(stage),
                           weight_decay=cfg.weight_decay)
    lr0 = cfg.lr_for(stage)
    decay = cfg.decay_for(stage)
    epochs = cfg.epochs_for(stage)

    def make_batch(idx, training, epoch):
        samples = [train_set[i] for i in idx] if training else [val_set[i] for i in idx]
        if stage == STAGE_Z:
            rng = None
            if training and cfg.augment:
                rng = np.random.default_rng([aug_seed, epoch, int(idx[0])])
            return _z_batch(samples, cfg, net_cfg, rng=rng)
        if stage == STAGE_VESSEL:
            return _vessel_batch(samples, cfg)
        probs = train_probs if training else val_probs
        targets = train_t if training else val_t
        x = torch.stack([probs[i] for i in idx])
        t = torch.stack([targets[i] for i in idx])
        return x, t

    def eval_loss(which_set, n):
        model.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, n, cfg.batch_size):
                idx = list(range(start, min(start + cfg.batch_size, n)))
                loss = _stage_losses(stage, model, make_batch(idx, False, 0), cfg, mask_t)
                total += float(loss) * len(idx)
                count += len(idx)
        return total / count

    history = []
    best_val = float("inf")
    best_params = ModelParams.from_module(model)

    for epoch in range(epochs):
        lr = lr0 * decay**epoch
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(len(train_set), generator=shuffle_g).tolist()
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = make_batch(idx, True, epoch)
            opt.zero_grad()
            loss = _stage_losses(stage, model, batch, cfg, mask_t, rng=drop_g)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"stage {stage}: non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_loss += float(loss) * len(idx)
            seen += len(idx)
        val = eval_loss(val_set, len(val_set))
        if not np.isfinite(val):
            raise NumericalError(f"stage {stage}: non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train": epoch_loss / seen, "val": val, "lr": lr})
        if val < best_val:
            best_val = val
            best_params = ModelParams.from_module(model)
        if log is not None:
            log(history[-1])
    return best_params, history

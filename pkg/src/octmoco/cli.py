"""Batch pipeline front-end.

Subcommands: ``simulate`` (phantom datasets), ``train {z|vessel|x}``,
``correct`` (apply trained networks to one volume), ``evaluate``
(metrics report + optional PNG renders). Configuration comes from an
optional JSON file (``--config`` or the OCTMOCO_CONFIG env var) with
command-line flags taking precedence.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, linalg, metrics
from .core import (
    Boundaries,
    Volume,
    ZDisplacementMap,
    apply_x_displacement,
    apply_z_displacement,
    binarize,
    normalize_boundaries,
    trunc_pixels,
)
from .errors import DataError, NumericalError
from .networks import (
    ARCH_VESSEL,
    ARCH_X,
    ARCH_Z,
    NetConfig,
    default_x_norm,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
    vesselnet_forward,
    xnet_forward,
    znet_forward,
)
from .simulate import PhantomConfig, PhantomSample, simulate_sample
from .train import STAGES, STAGE_X, STAGE_Z, STAGE_VESSEL, TrainConfig, train_stage

ENV_CONFIG = "OCTMOCO_CONFIG"
SPLIT_WEIGHTS = {"train": 142, "val": 19, "test": 37}  # default split proportions

SAMPLE_FILES = {
    "volume": "volume.omv",
    "volume_gt": "volume_gt.omv",
    "boundaries": "boundaries.omv",
    "boundaries_gt": "boundaries_gt.omv",
    "gt_z": "gt_z.omv",
    "gt_x": "gt_x.omv",
    "vessels": "vessels.omv",
}


def split_counts(count, weights=SPLIT_WEIGHTS):
    """Largest-remainder split of `count` samples into the given proportions."""
    total = sum(weights.values())
    quotas = {k: count * w / total for k, w in weights.items()}
    out = {k: int(q) for k, q in quotas.items()}
    rest = count - sum(out.values())
    order = sorted(weights, key=lambda k: quotas[k] - out[k], reverse=True)
    for k in order[:rest]:
        out[k] += 1
    return out


def load_config_file(path):
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if not path:
        return {}
    return io.read_json(path)


def _cfg_get(config, section, key, fallback):
    return config.get(section, {}).get(key, fallback)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    config = load_config_file(args.config)
    dims = tuple(args.dims or _cfg_get(config, "phantom", "dims", (64, 128, 24)))
    h, w, n = dims
    z_norm = args.z_norm or _cfg_get(config, "train", "z_norm", 10.0)
    x_norm = args.x_norm or _cfg_get(config, "train", "x_norm", None) or default_x_norm(w)
    motion = {
        "sigma_y": args.sigma_y if args.sigma_y is not None else _cfg_get(config, "motion", "sigma_y", 1.0),
        "sigma_x": args.sigma_x if args.sigma_x is not None else _cfg_get(config, "motion", "sigma_x", 1.0),
        "x_mean_abs": args.x_mean if args.x_mean is not None else _cfg_get(config, "motion", "x_mean_abs", 0.96),
        "x_max_abs": args.x_max if args.x_max is not None else _cfg_get(config, "motion", "x_max_abs", 5),
    }
    phantom_kwargs = {
        "layer_count": _cfg_get(config, "phantom", "layer_count", 4),
        "curvature_px": args.curvature if args.curvature is not None else _cfg_get(config, "phantom", "curvature_px", 5.0),
        "vessel_count": args.vessels if args.vessels is not None else _cfg_get(config, "phantom", "vessel_count", 6),
        "vessel_width_px": _cfg_get(config, "phantom", "vessel_width_px", 3.0),
        "noise_level": args.noise if args.noise is not None else _cfg_get(config, "phantom", "noise_level", 0.1),
    }

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = split_counts(args.count)
    splits = {k: [] for k in SPLIT_WEIGHTS}
    index = 0
    for split in ("train", "val", "test"):
        for _ in range(counts[split]):
            cfg = PhantomConfig(dims=dims, seed=args.seed + index, **phantom_kwargs)
            sample = simulate_sample(cfg, z_norm, x_norm,
                                     sigma_y=motion["sigma_y"], sigma_x=motion["sigma_x"],
                                     x_mean_abs=motion["x_mean_abs"], x_max_abs=motion["x_max_abs"])
            rel = f"{split}/sample_{index:04d}"
            sdir = out / rel
            sdir.mkdir(parents=True, exist_ok=True)
            geo = sample.volume.geometry
            io.write_volume(sdir / SAMPLE_FILES["volume"], sample.volume)
            io.write_volume(sdir / SAMPLE_FILES["volume_gt"], sample.volume_clean)
            io.write_boundaries(sdir / SAMPLE_FILES["boundaries"], sample.boundaries, geo)
            io.write_boundaries(sdir / SAMPLE_FILES["boundaries_gt"], sample.boundaries_clean, geo)
            io.write_zmap(sdir / SAMPLE_FILES["gt_z"], sample.gt_z, geo)
            io.write_xvec(sdir / SAMPLE_FILES["gt_x"], sample.gt_x, geo)
            io.write_vesselmap(sdir / SAMPLE_FILES["vessels"], sample.vessels, geo)
            io.write_json(sdir / "manifest.json", {"seed": cfg.seed, **SAMPLE_FILES})
            splits[split].append(rel)
            index += 1
    io.write_json(out / "dataset.json", {
        "count": args.count,
        "seed": args.seed,
        "dims": list(dims),
        "z_norm": z_norm,
        "x_norm": x_norm,
        "motion": motion,
        "phantom": phantom_kwargs,
        "splits": splits,
    })
    print(f"wrote {args.count} samples to {out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def load_sample(sample_dir) -> PhantomSample:
    sample_dir = Path(sample_dir)
    manifest = io.read_json(sample_dir / "manifest.json")
    return PhantomSample(
        seed=manifest["seed"],
        volume=io.read_volume(sample_dir / manifest["volume"]),
        boundaries=io.read_boundaries(sample_dir / manifest["boundaries"]),
        volume_clean=io.read_volume(sample_dir / manifest["volume_gt"]),
        boundaries_clean=io.read_boundaries(sample_dir / manifest["boundaries_gt"]),
        vessels=io.read_vesselmap(sample_dir / manifest["vessels"], kind="binary"),
        gt_z=io.read_zmap(sample_dir / manifest["gt_z"]),
        gt_x=io.read_xvec(sample_dir / manifest["gt_x"]),
    )


def load_dataset(data_dir):
    """Returns (dataset.json dict, {"train"/"val"/"test": [PhantomSample]})."""
    data_dir = Path(data_dir)
    meta = io.read_json(data_dir / "dataset.json")
    sets = {}
    for split, rels in meta["splits"].items():
        sets[split] = [load_sample(data_dir / rel) for rel in rels]
    return meta, sets


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    config = load_config_file(args.config)
    stage = args.stage
    if stage == STAGE_X and not args.vessel_ckpt:
        print("error: stage x requires --vessel-ckpt (train the vessel stage first)",
              file=sys.stderr)
        return 2
    meta, sets = load_dataset(args.data)
    if not sets.get("train") or not sets.get("val"):
        raise DataError("dataset has an empty train or val split")
    h, w, n = meta["dims"]

    tc_kwargs = dict(config.get("train", {}))
    tc_kwargs["z_norm"] = meta["z_norm"]
    tc_kwargs["x_norm"] = meta["x_norm"]
    if args.seed is not None:
        tc_kwargs["seed"] = args.seed
    if args.epochs is not None:
        tc_kwargs[f"epochs_{stage}"] = args.epochs
    if args.no_augment:
        tc_kwargs["augment"] = False
    train_cfg = TrainConfig(**tc_kwargs)

    net_section = dict(config.get("net", {}))
    base = args.base_channels or net_section.get("base_channels", 8)
    levels = net_section.get("levels", 4)
    if stage == STAGE_X:
        net_cfg = NetConfig(in_channels=1, levels=levels, base_channels=base,
                            dropout_p=net_section.get("dropout_p_x", 0.4),
                            z_norm=meta["z_norm"], x_norm=meta["x_norm"])
    else:
        net_cfg = NetConfig(in_channels=h, levels=levels, base_channels=base,
                            dropout_p=net_section.get("dropout_p", 0.2),
                            use_segmentation_input=(stage == STAGE_Z and args.with_seg),
                            z_norm=meta["z_norm"], x_norm=meta["x_norm"])

    vessel = None
    if stage == STAGE_X:
        arch, vcfg, vparams = load_checkpoint(args.vessel_ckpt)
        if arch != ARCH_VESSEL:
            raise DataError(f"--vessel-ckpt points at a {arch!r} checkpoint")
        vessel = (vcfg, vparams)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / f"{stage}_history.jsonl"
    lines = []

    def log(entry):
        lines.append(json.dumps(entry))
        if not args.quiet:
            print(f"[{stage}] epoch {entry['epoch']}: train={entry['train']:.5f} "
                  f"val={entry['val']:.5f} lr={entry['lr']:.2e}")

    datasets = {"train": sets["train"], "val": sets["val"]}
    params, history = train_stage(stage, datasets, train_cfg, net_cfg, vessel=vessel, log=log)

    arch = {STAGE_Z: ARCH_Z, STAGE_VESSEL: ARCH_VESSEL, STAGE_X: ARCH_X}[stage]
    ckpt_path = out / f"{stage}_best.json"
    save_checkpoint(ckpt_path, arch, net_cfg, params)
    history_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    best = min(h["val"] for h in history)
    print(f"stage {stage}: best val loss {best:.6f}; checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# correct


def _shift_boundaries(b: Boundaries, shifts_px, height):
    bz = np.clip(b.z_of.astype(np.float64) + shifts_px[None, :, :], 0.0, height - 1.0)
    bz[0] = np.minimum(bz[0], bz[1])
    return Boundaries(bz.astype(np.float32))


def cmd_correct(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volume = io.read_volume(args.volume)
    h, w, n = volume.shape
    bounds = io.read_boundaries(args.boundaries) if args.boundaries else None

    arch, zcfg, zparams = load_checkpoint(args.z_ckpt)
    if arch != ARCH_Z:
        raise DataError(f"--z-ckpt points at a {arch!r} checkpoint")
    if args.with_seg != zcfg.use_segmentation_input:
        raise DataError("--with-seg does not match the z checkpoint's configuration")
    if zcfg.use_segmentation_input and bounds is None:
        raise DataError("this z checkpoint needs --boundaries (segmentation input)")
    if args.tilt and bounds is None:
        raise DataError("--tilt needs --boundaries")

    emitted = {}

    bnorm = normalize_boundaries(bounds, zcfg.z_norm) if zcfg.use_segmentation_input else None
    d_raw = znet_forward(volume, bnorm, zcfg, zparams)
    io.write_zmap(out / "d_z_raw.omv", d_raw, volume.geometry)
    emitted["d_z_raw"] = "d_z_raw.omv"

    d_z = d_raw
    if args.ls_post:
        d_z = linalg.ls_line_project(d_raw)
        io.write_zmap(out / "d_z_post.omv", d_z, volume.geometry)
        emitted["d_z_post"] = "d_z_post.omv"

    corrected = apply_z_displacement(volume, d_z, zcfg.z_norm)
    if bounds is not None:
        bounds = _shift_boundaries(bounds, trunc_pixels(zcfg.z_norm, d_z.values), h)

    if args.tilt:
        d_tilt = linalg.tilt_displacement(bounds, h_ref=args.tilt_ref)
        io.write_zmap(out / "d_tilt.omv", d_tilt, volume.geometry)
        emitted["d_tilt"] = "d_tilt.omv"
        corrected = apply_z_displacement(corrected, d_tilt, z_norm=1.0)
        bounds = _shift_boundaries(bounds, trunc_pixels(1.0, d_tilt.values), h)

    if args.x_stage:
        if not args.vessel_ckpt or not args.x_ckpt:
            print("error: --x-stage requires --vessel-ckpt and --x-ckpt", file=sys.stderr)
            return 2
        varch, vcfg, vparams = load_checkpoint(args.vessel_ckpt)
        xarch, xcfg, xparams = load_checkpoint(args.x_ckpt)
        if varch != ARCH_VESSEL or xarch != ARCH_X:
            raise DataError("checkpoint architecture mismatch for the x stage")
        logits = vesselnet_forward(corrected, vcfg, vparams)
        from .core import VesselMap  # local import to avoid cycle noise at module top

        probs = VesselMap(sigmoid(logits).astype(np.float32))
        io.write_vesselmap(out / "vessels_pred.omv", probs, volume.geometry)
        emitted["vessels_pred"] = "vessels_pred.omv"
        d_x = xnet_forward(probs, xcfg, xparams)
        io.write_xvec(out / "d_x.omv", d_x, volume.geometry)
        emitted["d_x"] = "d_x.omv"
        px = trunc_pixels(xcfg.x_norm, d_x.values)
        io.write_omv(out / "d_x_px.omv", px.astype(np.float32), volume.geometry)
        emitted["d_x_px"] = "d_x_px.omv"
        corrected = apply_x_displacement(corrected, d_x, xcfg.x_norm)

    io.write_volume(out / "corrected.omv", corrected)
    emitted["corrected"] = "corrected.omv"
    if bounds is not None:
        io.write_boundaries(out / "boundaries_corrected.omv", bounds, volume.geometry)
        emitted["boundaries_corrected"] = "boundaries_corrected.omv"

    io.write_json(out / "correction.json", {
        "source_volume": str(args.volume),
        "flags": {"with_seg": args.with_seg, "ls_post": args.ls_post,
                  "tilt": args.tilt, "x_stage": args.x_stage},
        "z_norm": zcfg.z_norm,
        "x_norm": zcfg.x_norm,
        "files": emitted,
    })
    print(f"corrected volume written to {out / 'corrected.omv'}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _gamma_png(path, img, gamma=2.2):
    from PIL import Image

    g = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) ** (1.0 / gamma)
    Image.fromarray((g * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def cmd_evaluate(args):
    pred_dir = Path(args.pred)
    correction = io.read_json(pred_dir / "correction.json")
    files = correction["files"]
    sample_dir = Path(args.manifest).parent
    manifest = io.read_json(args.manifest)

    def pred_path(role):
        return pred_dir / files[role] if role in files else None

    gt_z = io.read_zmap(sample_dir / manifest["gt_z"])
    gt_x = io.read_xvec(sample_dir / manifest["gt_x"])
    gt_volume = io.read_volume(sample_dir / manifest["volume_gt"])
    gt_bounds = io.read_boundaries(sample_dir / manifest["boundaries_gt"])
    gt_vessels = io.read_vesselmap(sample_dir / manifest["vessels"], kind="binary")
    h = gt_volume.height
    geo = gt_volume.geometry
    z_norm = correction["z_norm"]
    x_norm = correction["x_norm"]

    report = {}
    d_z_path = pred_path("d_z_post") or pred_path("d_z_raw")
    if d_z_path:
        d_z = io.read_zmap(d_z_path)
        if d_z.shape != gt_z.shape:
            raise DataError("predicted and ground-truth Z maps have different shapes")
        report["mae_z"] = metrics.mae_z(d_z, gt_z, z_norm)
    if pred_path("d_x"):
        d_x = io.read_xvec(pred_path("d_x"))
        report["mae_x"] = metrics.mae_x(d_x, gt_x, x_norm)

    corrected = io.read_volume(pred_dir / files["corrected"])
    if corrected.shape != gt_volume.shape:
        raise DataError("corrected and ground-truth volumes have different shapes")
    report["pcc"] = metrics.pcc(corrected, gt_volume)

    if pred_path("boundaries_corrected"):
        pred_bounds = io.read_boundaries(pred_path("boundaries_corrected"))
        curv_x, _ = metrics.curvature_index(pred_bounds, "x", geo, h)
        curv_y, _ = metrics.curvature_index(pred_bounds, "y", geo, h)
        gcurv_x, _ = metrics.curvature_index(gt_bounds, "x", geo, h)
        gcurv_y, _ = metrics.curvature_index(gt_bounds, "y", geo, h)
        report["curv_x"] = curv_x
        report["curv_y"] = curv_y
        report["dist_x"] = metrics.distortion(curv_x, gcurv_x, gcurv_x)[0]
        dist_y, dist_xy = metrics.distortion(curv_y, gcurv_y, gcurv_x)
        report["dist_y"] = dist_y
        report["dist_xy"] = dist_xy

    if pred_path("vessels_pred"):
        pred_vessels = io.read_vesselmap(pred_path("vessels_pred"))
        report["dice"] = metrics.dice_binary(binarize(pred_vessels), gt_vessels)

    full = metrics.MetricsReport(**report)
    io.write_json(args.report, full.to_dict())

    if args.render:
        _, w, n = corrected.shape
        _gamma_png(pred_dir / "render_bscan.png", corrected.data[:, :, n // 2])
        _gamma_png(pred_dir / "render_cross.png", corrected.data[:, w // 2, :])
        _gamma_png(pred_dir / "render_enface.png", corrected.data.mean(axis=0))

    print(json.dumps(full.to_dict()))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="octmoco",
                                     description="OCT motion correction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, metavar=("H", "W", "N"))
    p.add_argument("--sigma-y", type=float, dest="sigma_y")
    p.add_argument("--sigma-x", type=float, dest="sigma_x")
    p.add_argument("--x-mean", type=float, dest="x_mean")
    p.add_argument("--x-max", type=int, dest="x_max")
    p.add_argument("--curvature", type=float)
    p.add_argument("--vessels", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--z-norm", type=float, dest="z_norm")
    p.add_argument("--x-norm", type=float, dest="x_norm")
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("stage", choices=list(STAGES))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--with-seg", action="store_true", dest="with_seg")
    p.add_argument("--no-augment", action="store_true", dest="no_augment")
    p.add_argument("--vessel-ckpt", dest="vessel_ckpt")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", help="apply trained networks to one volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--boundaries")
    p.add_argument("--z-ckpt", required=True, dest="z_ckpt")
    p.add_argument("--vessel-ckpt", dest="vessel_ckpt")
    p.add_argument("--x-ckpt", dest="x_ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--with-seg", action="store_true", dest="with_seg")
    p.add_argument("--ls-post", action="store_true", dest="ls_post")
    p.add_argument("--tilt", action="store_true")
    p.add_argument("--tilt-ref", type=float, default=300.0, dest="tilt_ref")
    p.add_argument("--x-stage", action="store_true", dest="x_stage")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("evaluate", help="compute a metrics report")
    p.add_argument("--pred", required=True, help="output directory of `correct`")
    p.add_argument("--manifest", required=True, help="sample manifest.json")
    p.add_argument("--report", required=True)
    p.add_argument("--render", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

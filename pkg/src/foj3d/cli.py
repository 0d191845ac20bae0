"""Command-line entry points: ``foj3d {phantom,denoise,ct,pointcloud}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig, load_config, save_config
from .grid import Volume, load_volume, save_volume
from .inverse import (
    PgdConfig,
    ScaledOperator,
    estimate_norm,
    reconstruct_lsq,
    reconstruct_pgd,
    write_residual_trace,
)
from .phantoms import KINDS, make_phantom
from .pointcloud import (
    PointCloud,
    add_outlier_noise,
    add_spread_noise,
    chamfer_l2,
    devoxelize_topk,
    read_xyz,
    voxel_counts,
    voxelize,
    write_xyz,
)
from .solver import NumericalError, denoise_volume, write_trace
from .tomo import (
    ParallelBeamProjector,
    PhotonNoiseModel,
    ProjectorGeometry,
    jittered_angles,
    load_sinogram,
    save_sinogram,
    simulate_low_dose,
)

log = logging.getLogger("foj3d")

OUTLIER_LEVELS = (0.0, 0.1, 0.3, 0.6, 0.9)
SPREAD_LEVELS = (0, 40000, 100000, 200000, 500000)
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(Exception):
    pass


def _out_dir(args) -> Path:
    if args.out_dir:
        path = Path(args.out_dir)
    else:
        path = Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.solver = replace(cfg.solver, seed=cfg.seed)
    if args.threads is not None:
        cfg.solver = replace(cfg.solver, threads=args.threads)
    return cfg


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"dims must be N or D,H,W with positive entries, got {text!r}")
    return tuple(parts)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _save_slices(path_prefix: Path, data: np.ndarray) -> None:
    """Grayscale mid-slices (axial, coronal, sagittal) as PNGs."""
    from PIL import Image

    lo, hi = float(data.min()), float(data.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    D, H, W = data.shape
    for name, sl in (("axial", data[D // 2]), ("coronal", data[:, H // 2]), ("sagittal", data[:, :, W // 2])):
        img = np.clip((sl - lo) * scale, 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(f"{path_prefix}_{name}.png")


def cmd_phantom(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if args.kind not in KINDS:
        raise InputError(f"unknown phantom kind {args.kind!r}; choose from {', '.join(KINDS)}")
    data = make_phantom(args.kind, args.dims)
    target = Path(args.output) if args.output else out / f"{args.kind}.vol"
    save_volume(target, Volume(data, (1.0 / max(args.dims),) * 3), phantom=args.kind)
    save_config(out / "resolved_config.json", cfg)
    if cfg.io.slices_png:
        _save_slices(out / args.kind, data)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    vol = load_volume(args.input)
    if min(vol.dims) < cfg.solver.patch_size:
        raise InputError(f"volume dims {vol.dims} are smaller than the patch size {cfg.solver.patch_size}")
    save_config(out / "resolved_config.json", cfg)
    denoised, state, trace = denoise_volume(vol, cfg.solver)
    target = Path(args.output) if args.output else out / "denoised.vol"
    save_volume(target, denoised)
    _write_json(out / "state.json", state.to_json())
    write_trace(Path(args.trace) if args.trace else out / "loss_trace.csv", trace)
    report = {"loss": dict(zip(("total", "data", "boundary", "color"), map(float, trace[-1][1:])))}
    if args.reference:
        ref = load_volume(args.reference)
        before = metrics.psnr(ref, vol)
        after = metrics.psnr(ref, denoised)
        report.update(input=before.to_dict(), output=after.to_dict(),
                      psnr_gain_db=after.to_dict()["psnr_db"] - before.to_dict()["psnr_db"])
        print(f"psnr {before.psnr_db:.2f} dB -> {after.psnr_db:.2f} dB")
    _write_json(out / "metrics.json", report)
    if cfg.io.slices_png:
        _save_slices(out / "denoised", denoised.data)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_ct(args) -> int:
    cfg = _config(args)
    if args.views is not None:
        cfg.tomo.views = args.views
    if args.photons is not None:
        cfg.tomo.photons = args.photons
    if args.method is not None:
        cfg.tomo.method = args.method
    if cfg.tomo.views < 1:
        raise InputError("need at least one view")
    if not cfg.tomo.photons > 0:
        raise InputError("photon count must be positive")
    if cfg.tomo.method not in ("pgd", "cgls"):
        raise InputError(f"unknown method {cfg.tomo.method!r}; choose pgd or cgls")
    out = _out_dir(args)
    truth = None
    if args.input_sino:
        sino, geom, _ = load_sinogram(args.input_sino)
    else:
        kind = args.phantom or "cube"
        if kind not in KINDS:
            raise InputError(f"unknown phantom kind {kind!r}; choose from {', '.join(KINDS)}")
        truth = make_phantom(kind, args.dims)
        geom = ProjectorGeometry(jittered_angles(cfg.tomo.views, cfg.seed), args.dims, (1.0 / max(args.dims),) * 3)
        clean = ParallelBeamProjector(geom).forward(truth)
        sino = simulate_low_dose(clean, PhotonNoiseModel(cfg.tomo.photons, cfg.seed))
        save_sinogram(out / "sinogram.sino", sino, geom, photons=cfg.tomo.photons, seed=cfg.seed)
    save_config(out / "resolved_config.json", cfg)
    A = ParallelBeamProjector(geom)
    b = sino
    if cfg.tomo.normalize_operator:
        norm = estimate_norm(A, 20, cfg.seed)
        if norm > 0:
            A, b = ScaledOperator(A, 1.0 / norm), sino / norm
    p = cfg.pgd
    if cfg.tomo.method == "cgls":
        res = reconstruct_lsq(A, b, p.n_outer)
        x, residuals = res.x, res.residuals
        if res.breakdown:
            log.warning("CGLS stopped early on a zero denominator")
    else:
        foj = replace(cfg.solver, n_init=p.n_init, n_refine=p.n_refine)
        res = reconstruct_pgd(A, b, PgdConfig(lam=p.lam, n_outer=p.n_outer, foj=foj, warm_start=p.warm_start))
        x, residuals = res.x, res.residuals
    target = Path(args.output) if args.output else out / "recon.vol"
    save_volume(target, Volume(x, geom.vol_spacing))
    write_residual_trace(out / "residual_trace.csv", residuals)
    report = {"method": cfg.tomo.method, "views": len(geom.angles), "residual_l2": residuals[-1]}
    if truth is not None:
        m = metrics.psnr(truth, x, residual=residuals[-1])
        report.update(m.to_dict())
        print(f"{cfg.tomo.method}: psnr {m.psnr_db:.2f} dB")
    _write_json(out / "metrics.json", report)
    if cfg.io.slices_png:
        _save_slices(out / "recon", x)
    print(f"wrote {target}")
    return EXIT_OK


def _parse_level(noise: str, text: str):
    valid = OUTLIER_LEVELS if noise == "outlier" else SPREAD_LEVELS
    try:
        value = float(text)
    except ValueError:
        value = None
    for v in valid:
        if value is not None and abs(value - v) < 1e-9:
            return v
    raise InputError(f"invalid level {text!r} for {noise} noise; valid levels: {', '.join(str(v) for v in valid)}")


def denoise_cloud(noisy: PointCloud, clean_hint: int, cfg: RunConfig, denoise: bool = True):
    """Voxelize, optionally FoJ-denoise and take the top ``k`` voxels; returns ``(cloud, baseline, info)``."""
    pc = cfg.pointcloud
    vol, transform = voxelize(noisy, pc.grid_dim)
    k = pc.k or clean_hint
    baseline = devoxelize_topk(vol, k, transform)
    info = {"k": int(k), "voxel_size": transform.voxel_size, "baseline_shortfall": baseline.shortfall}
    if not denoise:
        return baseline.cloud, baseline.cloud, info
    denoised, _, trace = denoise_volume(vol.data, cfg.solver)
    top = devoxelize_topk(denoised, k, transform)
    info.update(shortfall=top.shortfall, loss=float(trace[-1][1]))
    return top.cloud, baseline.cloud, info


def cmd_pointcloud(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if args.noise not in ("outlier", "spread"):
        raise InputError("noise must be outlier or spread")
    level = _parse_level(args.noise, args.level)
    clean = read_xyz(args.input)
    if len(clean) == 0:
        raise InputError(f"{args.input}: point cloud is empty")
    save_config(out / "resolved_config.json", cfg)
    if args.noise == "outlier":
        noisy = add_outlier_noise(clean, level, cfg.pointcloud.sigma_surface, cfg.seed)
    else:
        noisy = add_spread_noise(clean, int(level), cfg.pointcloud.pad, cfg.seed)
    # the voxel budget is the number of voxels the clean surface occupies
    _, transform = voxelize(noisy, cfg.pointcloud.grid_dim)
    hint = int(np.count_nonzero(voxel_counts(clean, transform)))
    result, baseline, info = denoise_cloud(noisy, hint, cfg, denoise=level != 0)
    target = Path(args.output) if args.output else out / "denoised.xyz"
    write_xyz(target, result)
    report = {
        "noise": args.noise,
        "level": level,
        "points_noisy": len(noisy),
        "chamfer_l2": chamfer_l2(result, clean),
        "chamfer_l2_baseline": chamfer_l2(baseline, clean),
        **info,
    }
    _write_json(Path(args.report) if args.report else out / "report.json", report)
    print(f"chamfer {report['chamfer_l2']:.6g} (baseline {report['chamfer_l2_baseline']:.6g})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foj3d", description="Field-of-junctions volume denoising and reconstruction.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out-dir", help="run directory (default: runs/<timestamp>)")
    common.add_argument("--threads", type=int, help="worker threads for patch batches")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic volume")
    p.add_argument("--kind", required=True)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--output")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("denoise", parents=[common], help="FoJ-denoise a volume")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--trace", help="loss trace CSV")
    p.add_argument("--reference", help="clean volume for PSNR reporting")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("ct", parents=[common], help="sparse-view low-dose CT reconstruction")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--phantom")
    src.add_argument("--input-sino")
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--views", type=int)
    p.add_argument("--photons", type=float)
    p.add_argument("--method")
    p.add_argument("--output")
    p.set_defaults(func=cmd_ct)

    p = sub.add_parser("pointcloud", parents=[common], help="point-cloud denoising via voxels")
    p.add_argument("--input", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--level", required=True)
    p.add_argument("--output")
    p.add_argument("--report")
    p.set_defaults(func=cmd_pointcloud)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface orchestrating the pipelines end to end.

Every command exits 0 on success and nonzero with a one-line
``error: <message>`` on stderr otherwise.  Each run directory receives the
exact config used, so runs are reproducible from their outputs alone.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dynamics, metrics, synth
from .config import RunConfig, config_from_dict, load_config, save_config
from .ingest import MultiViewDataset
from .metrics import (
    AblationRow,
    eval_masked_psnr,
    plot_psnr_curves,
    run_ablation,
    write_ablation_csv,
    write_metrics_csv,
)
from .optim import fit_initial_frame
from .render import render, save_image_png
from .scene import CameraModel, GaussianCloud, rotation_to_quaternion
from .ingest import load_calibration


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "backend", None):
        cfg.backend = args.backend
    if not cfg.dataset:
        raise ValueError("no dataset path configured (use --dataset or a config file)")
    if not cfg.out_dir:
        raise ValueError("no output directory configured (use --out or a config file)")
    return cfg


def _open_dataset(cfg: RunConfig) -> MultiViewDataset:
    cache = os.environ.get("DYNSPLAT_CACHE_DIR")
    return MultiViewDataset.load(cfg.dataset, cache_dir=cache)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return out


def cmd_synth_gen(args) -> int:
    spec = synth.SceneSpec.from_json(args.spec) if args.spec else synth.SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    synth.render_dataset(spec, args.out)
    print(f"dataset written to {args.out}")
    return 0


def cmd_fit_init(args) -> int:
    cfg = _load_run_config(args)
    dataset = _open_dataset(cfg)
    out = _prepare_out(cfg)
    fit = fit_initial_frame(dataset, cfg, out_dir=out)
    fit.cloud.save(out / "init_cloud.npz")
    np.savez(
        out / "camera_calibration.npz",
        color_scales=fit.rig.color_scales.detach().numpy(),
        color_offsets=fit.rig.color_offsets.detach().numpy(),
    )
    rows = list(fit.metrics)
    val_cam = cfg.val_camera if cfg.val_camera is not None else dataset.val_camera
    psnr = eval_masked_psnr(fit.cloud, fit.rig, dataset, cfg, val_cam)
    rows.append((len(fit.metrics), "val_masked_psnr", psnr if psnr is not None else float("nan")))
    write_metrics_csv(rows, out / "metrics.csv")
    print(f"fit complete: {len(fit.cloud)} Gaussians, val masked PSNR {metrics.psnr_csv_value(psnr)}")
    return 0


def cmd_track(args) -> int:
    cfg = _load_run_config(args)
    dataset = _open_dataset(cfg)
    out = _prepare_out(cfg)
    if cfg.backend == "iterative":
        fit = fit_initial_frame(dataset, cfg)
        log, rows = dynamics.track_iterative(fit, dataset, cfg, out_dir=out)
    elif cfg.backend == "deform":
        _, fit, log, joint_rows = dynamics.train_deformation(dataset, cfg, out_dir=out)
        rows = joint_rows
    else:
        raise ValueError(f"unknown backend '{cfg.backend}' (expected 'iterative' or 'deform')")
    write_metrics_csv(rows, out / "metrics.csv", header=("frame", "name", "value"))
    val_cam = cfg.val_camera if cfg.val_camera is not None else dataset.val_camera
    dynamics.export_trajectories(
        log, out, seed=cfg.seed, camera=dataset.cameras[val_cam],
        background=lambda f: dataset.targets(val_cam, min(f, dataset.n_frames - 1), cfg.prep, False).image,
    )
    psnr_rows = [(f, n, v) for f, n, v in rows if n.endswith("psnr")]
    if psnr_rows:
        plot_psnr_curves(psnr_rows, out / "psnr_frames.png")
    print(f"tracking complete: {log.n_frames} frames logged to {out}")
    return 0


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation between two unit quaternions."""
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-8:
        out = (1 - u) * q0 + u * q1
        return out / np.linalg.norm(out)
    return (np.sin((1 - u) * theta) * q0 + np.sin(u * theta) * q1) / np.sin(theta)


def interpolate_camera(cam_a: CameraModel, cam_b: CameraModel, u: float) -> CameraModel:
    """Novel pose between two cameras: slerp orientation, lerp position."""
    qa = rotation_to_quaternion(cam_a.rotation)
    qb = rotation_to_quaternion(cam_b.rotation)
    q = slerp(qa, qb, u)
    from .scene import quaternion_to_rotation

    rot = quaternion_to_rotation(torch.from_numpy(q)).numpy()
    center = (1 - u) * cam_a.center() + u * cam_b.center()
    return CameraModel(
        fx=(1 - u) * cam_a.fx + u * cam_b.fx,
        fy=(1 - u) * cam_a.fy + u * cam_b.fy,
        cx=(1 - u) * cam_a.cx + u * cam_b.cx,
        cy=(1 - u) * cam_a.cy + u * cam_b.cy,
        k1=0.0,
        rotation=rot,
        translation=-rot @ center,
        width=cam_a.width,
        height=cam_a.height,
    )


def cmd_render(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint does not exist: {checkpoint}")
    cloud = GaussianCloud.load(checkpoint)
    cameras, _, _, _ = load_calibration(args.calibration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs: list[tuple[int, CameraModel]] = []
    if args.cameras:
        for tok in args.cameras.split(","):
            cam_id = int(tok)
            if cam_id < 0 or cam_id >= len(cameras):
                raise ValueError(f"camera id {cam_id} out of range (rig has {len(cameras)})")
            jobs.append((cam_id, cameras[cam_id]))
    if args.interpolate:
        a, b, steps = (int(v) for v in args.interpolate.split(":"))
        for s in range(steps):
            u = (s + 1) / (steps + 1)
            jobs.append((len(cameras) + s, interpolate_camera(cameras[a], cameras[b], u)))
    if not jobs:
        raise ValueError("nothing to render: pass --cameras and/or --interpolate")
    with torch.no_grad():
        for cam_id, camera in jobs:
            frame = render(cloud, camera)
            save_image_png(frame.color, out / f"cam{cam_id}_frame{args.frame:06d}.png")
    print(f"rendered {len(jobs)} views to {out}")
    return 0


def cmd_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"run config does not exist: {cfg_path}")
    cfg = load_config(cfg_path)
    dataset = _open_dataset(cfg)
    val_cam = cfg.val_camera if cfg.val_camera is not None else dataset.val_camera
    train_cams = [i for i in range(dataset.n_cameras) if i != val_cam]
    rig = dataset.rig(cfg.torch_dtype())
    calib = run_dir / "camera_calibration.npz"
    if calib.exists():
        with np.load(calib) as data:
            rig.color_scales = torch.from_numpy(data["color_scales"]).to(cfg.torch_dtype())
            rig.color_offsets = torch.from_numpy(data["color_offsets"]).to(cfg.torch_dtype())
    rows = []
    checkpoints = sorted(run_dir.glob("frame*.ckpt.npz"))
    if not checkpoints:
        raise FileNotFoundError(f"no frame checkpoints found in {run_dir}")
    for ckpt in checkpoints:
        f = int(ckpt.name[5:11])
        cloud = GaussianCloud.load(ckpt).to(cfg.torch_dtype())
        val = eval_masked_psnr(cloud, rig, dataset, cfg, val_cam, min(f, dataset.n_frames - 1))
        train = [eval_masked_psnr(cloud, rig, dataset, cfg, c, min(f, dataset.n_frames - 1)) for c in train_cams]
        train = [p for p in train if p is not None]
        if val is not None:
            rows.append((f, "val_psnr", float(val)))
        if train:
            rows.append((f, "train_psnr", float(np.mean(train))))
    write_metrics_csv(rows, run_dir / "psnr_frames.csv", header=("frame", "name", "value"))
    plot_psnr_curves(rows, run_dir / "psnr_frames.png")
    print(f"metrics written for {len(checkpoints)} checkpoints in {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    dataset = _open_dataset(cfg)
    out = _prepare_out(cfg)
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise FileNotFoundError(f"grid file does not exist: {grid_path}")
    grid = json.loads(grid_path.read_text())
    settings = [
        AblationRow(
            mask=bool(row["mask"]), lambda_seg=float(row["lambda_seg"]), sparse=bool(row["sparse"]),
            n_init_points=int(row["n_init_points"]), init_range=float(row["init_range"]),
        )
        for row in grid
    ]
    val_cams = [int(v) for v in args.val_cameras.split(",")] if args.val_cameras else None
    rows = run_ablation(dataset, settings, cfg, val_cams)
    write_ablation_csv(rows, out / "ablation.csv")
    print(f"ablation table with {len(rows)} rows written to {out / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset with ground truth")
    p.add_argument("--spec", help="scene spec JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_gen)

    for name, func in (("fit-init", cmd_fit_init), ("track", cmd_track), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--dataset")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if name == "track":
            p.add_argument("--backend", choices=["iterative", "deform"])
        if name == "ablate":
            p.add_argument("--grid", required=True, help="JSON list of ablation settings")
            p.add_argument("--val-cameras", help="comma-separated validation camera ids")
        p.set_defaults(func=func)

    p = sub.add_parser("render", help="render a cloud checkpoint from given or interpolated poses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cameras", help="comma-separated camera ids")
    p.add_argument("--interpolate", help="A:B:steps interpolated poses between cameras A and B")
    p.add_argument("--frame", type=int, default=0, help="frame tag used in output filenames")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="per-frame masked PSNR table and plot for a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # one-line machine-parseable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

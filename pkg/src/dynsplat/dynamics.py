"""Temporal backends: per-frame iterative tracking with velocity prediction,
and a deformation field trained jointly over the whole sequence."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
from PIL import Image, ImageDraw

from .config import DeformConfig, RunConfig
from .ingest import MultiViewDataset
from .losses import (
    build_neighbor_graph,
    image_loss,
    iso_loss,
    rigid_loss,
    rot_loss,
    seg_loss,
    total_dyn_loss,
)
from .metrics import eval_masked_psnr
from .optim import (
    AdamGroup,
    BlockSampler,
    FitResult,
    OptimState,
    adam_step,
    densify_and_prune,
    densify_tick,
    fit_initial_frame,
    group_learning_rate,
    resolve_bounds,
)
from .render import render_training
from .scene import CameraRig, GaussianCloud


@dataclass
class TrajectoryLog:
    """Per-frame snapshots of Gaussian positions at a fixed population."""

    positions: list = field(default_factory=list)    # list of (N, 3) numpy arrays
    timestamps: list = field(default_factory=list)   # seconds

    def append(self, positions: torch.Tensor, timestamp: float) -> None:
        snap = positions.detach().numpy().copy()
        if self.positions and snap.shape != self.positions[0].shape:
            raise ValueError("Gaussian count changed between trajectory snapshots")
        self.positions.append(snap)
        self.timestamps.append(float(timestamp))

    @property
    def n_frames(self) -> int:
        return len(self.positions)

    def as_array(self) -> np.ndarray:
        return np.stack(self.positions, axis=0)


def positional_encoding(p: torch.Tensor, order: int) -> torch.Tensor:
    """Frequency-doubling sinusoidal features (sin 2^k pi p, cos 2^k pi p), k < order.

    Output has 2*order components per input element, interleaved sin/cos.
    """
    p = torch.as_tensor(p)
    freqs = (2.0 ** torch.arange(order, dtype=p.dtype)) * torch.pi
    angles = p.unsqueeze(-1) * freqs
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(start_dim=-2)


def encode_spacetime(positions_norm: torch.Tensor, t_enc: torch.Tensor, order: int) -> torch.Tensor:
    """(N, 8*order) features from normalized positions (N, 3) and encoded time (2*order,)."""
    spatial = positional_encoding(positions_norm, order).flatten(start_dim=-2)
    n = spatial.shape[0] if spatial.ndim == 2 else 1
    return torch.cat([spatial.reshape(n, -1), t_enc.reshape(1, -1).expand(n, -1)], dim=1)


class DeformationField(nn.Module):
    """MLP mapping encoded canonical space-time to (position, rotation, scale) deltas.

    The final layer is zero-initialized so a fresh field reproduces the static
    scene exactly at every time.
    """

    def __init__(self, center, extent: float, order: int = 10, hidden_dim: int = 512,
                 n_layers: int = 8, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.order = order
        self.register_buffer("center", torch.as_tensor(np.asarray(center), dtype=dtype).reshape(3))
        self.extent = float(extent)
        in_dim = 4 * 2 * order
        layers: list[nn.Module] = []
        dims = [in_dim] + [hidden_dim] * n_layers
        for a, b in zip(dims[:-1], dims[1:]):
            layers.append(nn.Linear(a, b))
            layers.append(nn.SiLU())
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(hidden_dim, 10)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.to(dtype)

    def forward(self, positions: torch.Tensor, t: torch.Tensor,
                time_noise: Optional[torch.Tensor] = None):
        norm = (positions - self.center) / self.extent
        t_enc = positional_encoding(t.reshape(()), self.order)
        if time_noise is not None:
            t_enc = t_enc + time_noise
        feats = encode_spacetime(norm, t_enc, self.order)
        out = self.head(self.body(feats))
        return out[:, 0:3], out[:, 3:7], out[:, 7:10]

    def save(self, path: Path | str) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        meta = np.array([self.order, self.head.in_features, (len(self.body) // 2)], dtype=np.int64)
        np.savez(path, __meta__=meta, __extent__=np.float64(self.extent), **arrays)

    @staticmethod
    def load(path: Path | str, dtype: torch.dtype = torch.float32) -> "DeformationField":
        with np.load(path) as data:
            order, hidden, n_layers = (int(v) for v in data["__meta__"])
            extent = float(data["__extent__"])
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files if not k.startswith("__")}
        field_ = DeformationField(state["center"].numpy(), extent, order, hidden, n_layers, dtype)
        field_.load_state_dict({k: v.to(dtype) for k, v in state.items()})
        return field_


def time_noise_std(joint_iteration: int, cfg: DeformConfig) -> float:
    """Annealed std of the Gaussian noise added to the encoded time value."""
    return cfg.time_noise_std * max(0.0, 1.0 - joint_iteration / cfg.time_noise_anneal_iters)


def apply_deformation(field: DeformationField, cloud: GaussianCloud, t: float | torch.Tensor,
                      time_noise: Optional[torch.Tensor] = None) -> GaussianCloud:
    """Cloud at time t: position/rotation/scale deltas applied to the canonical state."""
    t = torch.as_tensor(t, dtype=cloud.dtype)
    d_mu, d_q, d_ls = field(cloud.positions, t, time_noise)
    return GaussianCloud(
        positions=cloud.positions + d_mu,
        log_scales=cloud.log_scales + d_ls,
        quaternions=cloud.quaternions + d_q,
        opacity_logits=cloud.opacity_logits,
        colors=cloud.colors,
        seg_colors=cloud.seg_colors,
    )


def frame_time(frame: int, n_frames: int) -> float:
    return frame / (n_frames - 1) if n_frames > 1 else 0.0


def track_iterative(
    fit: FitResult,
    dataset: MultiViewDataset,
    config: RunConfig,
    out_dir: Optional[Path] = None,
    n_frames: Optional[int] = None,
) -> tuple[TrajectoryLog, list]:
    """Frame-by-frame tracking: constant-velocity prediction then 2000-step refits.

    The Gaussian population is frozen after the initial frame; each frame
    minimizes the dynamic loss against targets of that frame, regularized
    toward the previous frame's converged state and the initial geometry.
    """
    cloud, rig = fit.cloud, fit.rig
    rig.color_scales.requires_grad_(False)
    rig.color_offsets.requires_grad_(False)
    bounds = resolve_bounds(dataset, config)
    val_cam = config.val_camera if config.val_camera is not None else dataset.val_camera
    train_cams = [i for i in range(dataset.n_cameras) if i != val_cam]
    total_frames = n_frames if n_frames is not None else (config.n_frames or dataset.n_frames)

    rng = np.random.default_rng(config.seed + 1)
    graph = build_neighbor_graph(cloud.positions, config.neighbors.k, config.neighbors.weight_falloff)
    mu_init = cloud.positions.detach().clone()
    state = OptimState.for_cloud(cloud, seed=config.seed)
    log = TrajectoryLog()
    log.append(cloud.positions, 0.0)
    metrics: list = []

    mu_prev2 = cloud.positions.detach().clone()
    mu_prev = cloud.positions.detach().clone()
    q_prev = cloud.quaternions.detach().clone()
    if out_dir is not None:
        cloud.save(Path(out_dir) / "frame000000.ckpt.npz")

    for f in range(1, total_frames):
        with torch.no_grad():
            cloud.positions.data.add_(mu_prev - mu_prev2)  # constant-velocity prediction
        targets = {cam: dataset.targets_t(cam, f, config.prep, config.masking, cloud.dtype) for cam in train_cams}
        sampler = BlockSampler(train_cams, rng)
        for it in range(config.track_iters):
            cam = sampler.next()
            target_img, target_seg, _ = targets[cam]
            frame_out, _ = render_training(
                cloud, dataset.cameras[cam], rig.color_scales[cam], rig.color_offsets[cam], config.render
            )
            l_im = image_loss(frame_out.color, target_img, config.weights.dssim)
            l_seg = seg_loss(frame_out.seg, target_seg, config.weights.dssim)
            l_rigid = rigid_loss(mu_prev, cloud.positions, q_prev, cloud.quaternions, graph)
            l_rot = rot_loss(q_prev, cloud.quaternions, graph)
            l_iso = iso_loss(mu_init, cloud.positions, graph)
            loss = total_dyn_loss(l_im, l_seg, l_rigid, l_rot, l_iso, config.weights)
            params = cloud.tensors()
            for t in params.values():
                t.grad = None
            loss.backward()
            with torch.no_grad():
                for name, p in params.items():
                    if p.grad is not None:
                        adam_step(p, p.grad, state.adam[name],
                                  group_learning_rate(name, config.lrs, bounds.scene_extent), name=name)
            if it == config.track_iters - 1:
                for name, value in (("loss_image", l_im), ("loss_seg", l_seg), ("loss_rigid", l_rigid),
                                    ("loss_rot", l_rot), ("loss_iso", l_iso), ("loss_total", loss)):
                    metrics.append((f, name, float(value)))
        mu_prev2 = mu_prev
        mu_prev = cloud.positions.detach().clone()
        q_prev = cloud.quaternions.detach().clone()
        log.append(cloud.positions, f / config.fps)
        val_psnr = eval_masked_psnr(cloud, rig, dataset, config, val_cam, f)
        if val_psnr is not None:
            metrics.append((f, "val_psnr", float(val_psnr)))
        train_psnrs = [eval_masked_psnr(cloud, rig, dataset, config, cam, f) for cam in train_cams]
        train_psnrs = [p for p in train_psnrs if p is not None]
        if train_psnrs:
            metrics.append((f, "train_psnr", float(np.mean(train_psnrs))))
        if out_dir is not None:
            cloud.save(Path(out_dir) / f"frame{f:06d}.ckpt.npz")
    return log, metrics


def train_deformation(
    dataset: MultiViewDataset,
    config: RunConfig,
    out_dir: Optional[Path] = None,
    static_fit: Optional[FitResult] = None,
    joint_iters: Optional[int] = None,
    n_frames: Optional[int] = None,
) -> tuple[DeformationField, FitResult, TrajectoryLog, list]:
    """Static fit followed by whole-sequence training of the deformation field.

    Joint iterations sample a random (view, time) pair, perturb the encoded
    time with annealed Gaussian noise and minimize the image loss only, while
    densification keeps running on the canonical cloud.
    """
    deform_cfg = config.deform
    if static_fit is None:
        static_fit = fit_initial_frame(dataset, config, frame=0, iterations=deform_cfg.static_iters)
    cloud, rig, state = static_fit.cloud, static_fit.rig, static_fit.state
    rig.color_scales.requires_grad_(False)
    rig.color_offsets.requires_grad_(False)
    bounds = resolve_bounds(dataset, config)
    val_cam = config.val_camera if config.val_camera is not None else dataset.val_camera
    train_cams = [i for i in range(dataset.n_cameras) if i != val_cam]
    total_frames = n_frames if n_frames is not None else (config.n_frames or dataset.n_frames)
    dtype = config.torch_dtype()

    field_ = DeformationField(
        bounds.center, bounds.scene_extent, deform_cfg.encoding_order,
        deform_cfg.hidden_dim, deform_cfg.n_layers, dtype,
    )
    field_params = {f"deform.{name}": p for name, p in field_.named_parameters()}
    for name, p in field_params.items():
        if name not in state.adam:
            state.adam[name] = AdamGroup.like(p)

    targets = {
        (cam, f): dataset.targets_t(cam, f, config.prep, config.masking, dtype)
        for cam in train_cams
        for f in range(total_frames)
    }
    rng = np.random.default_rng(config.seed + 2)
    noise_gen = torch.Generator().manual_seed(config.seed + 3)
    metrics: list = []
    n_joint = joint_iters if joint_iters is not None else deform_cfg.joint_iters

    for j in range(n_joint):
        global_it = deform_cfg.static_iters + j
        f = int(rng.integers(total_frames))
        cam = train_cams[int(rng.integers(len(train_cams)))]
        sigma = time_noise_std(j, deform_cfg)
        noise = None
        if sigma > 0:
            noise = sigma * torch.randn(2 * deform_cfg.encoding_order, dtype=dtype, generator=noise_gen)
        deformed = apply_deformation(field_, cloud, frame_time(f, total_frames), noise)
        frame_out, aux = render_training(
            deformed, dataset.cameras[cam], rig.color_scales[cam], rig.color_offsets[cam], config.render
        )
        target_img, _, _ = targets[(cam, f)]
        loss = config.weights.image * image_loss(frame_out.color, target_img, config.weights.dssim)

        params = {**cloud.tensors(), **field_params}
        for t in params.values():
            t.grad = None
        loss.backward()
        with torch.no_grad():
            g2d = aux["mean2d"].grad
            if g2d is not None:
                camera = dataset.cameras[cam]
                half_w = torch.tensor([camera.width / 2.0, camera.height / 2.0], dtype=dtype)
                state.grad_accum[aux["kept_idx"]] += torch.linalg.norm(g2d * half_w, dim=-1)
                state.grad_count[aux["kept_idx"]] += 1.0
            for name, p in params.items():
                if p.grad is not None:
                    adam_step(p, p.grad, state.adam[name],
                              group_learning_rate(name, config.lrs, bounds.scene_extent), name=name)
        metrics.append((global_it, "loss_image_joint", float(loss)))
        metrics.append((global_it, "time_noise_std", sigma))
        if densify_tick(global_it + 1, config.densify):
            cloud, state = densify_and_prune(
                cloud, state, config.densify, bounds, rng,
                masking=config.masking, sparsity=config.sparsity_pruning,
                max_gaussians=config.max_gaussians,
            )

    log = TrajectoryLog()
    with torch.no_grad():
        for f in range(total_frames):
            deformed = apply_deformation(field_, cloud, frame_time(f, total_frames))
            log.append(deformed.positions, f / config.fps)
    if out_dir is not None:
        field_.save(Path(out_dir) / "deformation.npz")
        with torch.no_grad():
            for f in range(total_frames):
                apply_deformation(field_, cloud, frame_time(f, total_frames)).save(
                    Path(out_dir) / f"frame{f:06d}.ckpt.npz"
                )
    return field_, FitResult(cloud, rig, state, static_fit.metrics), log, metrics


def export_trajectories(
    log: TrajectoryLog,
    out_dir: Path | str,
    sample_fraction: float = 0.02,
    history: int = 10,
    interpolation: int = 10,
    seed: int = 0,
    camera=None,
    background: Optional[Callable[[int], np.ndarray]] = None,
) -> Path:
    """Write the trajectory CSV and per-frame overlay PNGs.

    A seeded subsample of Gaussians gets a unique color each; overlays show
    the last ``history`` frames of each track, temporally upsampled
    ``interpolation``-fold, projected through ``camera`` when given.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = log.as_array()  # (F, N, 3)
    n = arr.shape[1]
    rng = np.random.default_rng(seed)
    count = max(1, int(round(n * sample_fraction)))
    ids = np.sort(rng.choice(n, size=min(count, n), replace=False))

    with (out / "trajectories.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gaussian_id", "frame", "x", "y", "z"])
        for f in range(arr.shape[0]):
            for gid in ids:
                x, y, z = arr[f, gid]
                writer.writerow([int(gid), f, repr(float(x)), repr(float(y)), repr(float(z))])

    if camera is not None:
        colors = (np.asarray(matplotlib_colors(len(ids), seed)) * 255).astype(np.uint8)
        for f in range(arr.shape[0]):
            if background is not None:
                base = np.clip(background(f), 0.0, 1.0)
                img = Image.fromarray((base * 255).astype(np.uint8))
            else:
                img = Image.new("RGB", (camera.width, camera.height), (0, 0, 0))
            draw = ImageDraw.Draw(img)
            f0 = max(0, f - history)
            for ci, gid in enumerate(ids):
                track = arr[f0 : f + 1, gid]  # (T, 3)
                dense = _interpolate_track(track, interpolation)
                uv, z = camera.project(dense)
                pts = [(float(u), float(v)) for (u, v), depth in zip(uv, z) if depth > 0]
                color = tuple(int(c) for c in colors[ci])
                if len(pts) >= 2:
                    draw.line(pts, fill=color, width=1)
                if pts:
                    u, v = pts[-1]
                    draw.ellipse([u - 1, v - 1, u + 1, v + 1], fill=color)
            img.save(out / f"traj_frame{f:06d}.png")
    return out


def _interpolate_track(track: np.ndarray, factor: int) -> np.ndarray:
    if track.shape[0] < 2 or factor <= 1:
        return track
    steps = np.linspace(0.0, track.shape[0] - 1.0, (track.shape[0] - 1) * factor + 1)
    i0 = np.floor(steps).astype(int)
    i1 = np.minimum(i0 + 1, track.shape[0] - 1)
    frac = (steps - i0)[:, None]
    return track[i0] * (1 - frac) + track[i1] * frac


def matplotlib_colors(count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed + 11)
    hues = (np.arange(count) / max(count, 1) + rng.uniform(0, 1)) % 1.0
    import colorsys

    return np.array([colorsys.hsv_to_rgb(h, 0.9, 1.0) for h in hues])

"""Adam optimization with per-group learning rates and the densify/prune
schedule that adapts the number of Gaussians while fitting the first frame."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .config import DensifySchedule, LearningRates, RunConfig
from .ingest import MultiViewDataset
from .losses import image_loss, seg_loss, total_init_loss
from .render import render_training
from .scene import (
    CameraRig,
    EmptyCloudError,
    GaussianCloud,
    SceneBounds,
    inverse_sigmoid,
    prune_outside_radius,
)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
CLOUD_GROUPS = ("positions", "log_scales", "quaternions", "opacity_logits", "colors", "seg_colors")


@dataclass
class AdamGroup:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @staticmethod
    def like(param: torch.Tensor) -> "AdamGroup":
        return AdamGroup(torch.zeros_like(param, requires_grad=False),
                         torch.zeros_like(param, requires_grad=False))


def adam_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    group: AdamGroup,
    lr: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
    name: str = "param",
) -> None:
    """Standard bias-corrected Adam update, in place on ``param.data``."""
    if not bool(torch.isfinite(grad).all()):
        raise FloatingPointError(f"non-finite gradient in parameter group '{name}'")
    b1, b2 = betas
    group.step += 1
    group.m.mul_(b1).add_(grad, alpha=1.0 - b1)
    group.v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
    m_hat = group.m / (1.0 - b1 ** group.step)
    v_hat = group.v / (1.0 - b2 ** group.step)
    param.data.add_(-lr * m_hat / (v_hat.sqrt() + eps))


@dataclass
class OptimState:
    """Adam moments per group plus the densification statistics.

    Rows of the per-Gaussian groups stay index-aligned with the cloud through
    every densify/prune: new rows enter as zeros, removed rows are dropped.
    """

    adam: dict
    grad_accum: torch.Tensor   # (N,) accumulated screen-space grad norms
    grad_count: torch.Tensor   # (N,) number of accumulation events
    iteration: int = 0
    seed: int = 0

    @staticmethod
    def for_cloud(cloud: GaussianCloud, extra: Optional[dict] = None, seed: int = 0) -> "OptimState":
        adam = {name: AdamGroup.like(t) for name, t in cloud.tensors().items()}
        for name, t in (extra or {}).items():
            adam[name] = AdamGroup.like(t)
        n = len(cloud)
        return OptimState(adam, torch.zeros(n, dtype=cloud.dtype), torch.zeros(n, dtype=cloud.dtype), 0, seed)

    def select_gaussian_rows(self, keep: torch.Tensor) -> None:
        for name in CLOUD_GROUPS:
            g = self.adam[name]
            g.m = g.m[keep]
            g.v = g.v[keep]
        self.grad_accum = self.grad_accum[keep]
        self.grad_count = self.grad_count[keep]

    def append_gaussian_rows(self, n_new: int) -> None:
        if n_new == 0:
            return
        for name in CLOUD_GROUPS:
            g = self.adam[name]
            pad = (n_new,) + tuple(g.m.shape[1:])
            g.m = torch.cat([g.m, torch.zeros(pad, dtype=g.m.dtype)], dim=0)
            g.v = torch.cat([g.v, torch.zeros(pad, dtype=g.v.dtype)], dim=0)
        zero = torch.zeros(n_new, dtype=self.grad_accum.dtype)
        self.grad_accum = torch.cat([self.grad_accum, zero], dim=0)
        self.grad_count = torch.cat([self.grad_count, zero.clone()], dim=0)

    def reset_densify_stats(self, n: int) -> None:
        self.grad_accum = torch.zeros(n, dtype=self.grad_accum.dtype)
        self.grad_count = torch.zeros(n, dtype=self.grad_count.dtype)


class BlockSampler:
    """Shuffled sampling in blocks without replacement."""

    def __init__(self, items, rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self.queue: list = []

    def next(self):
        if not self.queue:
            order = self.rng.permutation(len(self.items))
            self.queue = [self.items[i] for i in order]
        return self.queue.pop(0)


def _nearest_neighbor_distances(positions: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(positions).query(positions, k=2)
    return dist[:, 1]


def _sparsity_keep_mask(positions: np.ndarray, distance: float) -> np.ndarray:
    return _nearest_neighbor_distances(positions) <= distance


def sparsity_prune(cloud: GaussianCloud, distance: float = 0.1) -> GaussianCloud:
    """Remove Gaussians isolated beyond ``distance`` from any other, one pass.

    A survivor's nearest neighbor within ``distance`` is itself never isolated
    (isolation is symmetric at that radius), so one pass already leaves no
    survivor with nearest-neighbor distance above the threshold.
    """
    if len(cloud) < 2:
        raise ValueError("sparsity pruning needs at least 2 Gaussians")
    keep = _sparsity_keep_mask(cloud.positions.detach().numpy(), distance)
    if keep.all():
        return cloud
    return cloud.select(torch.from_numpy(keep))


def init_cloud(
    bounds: SceneBounds,
    n_points: int,
    init_range: float,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> GaussianCloud:
    """Uniform-cube initialization around the scene center.

    Scales start at the mean distance to the 3 nearest neighbors, opacity at
    0.1 and both color channels at mid-gray.
    """
    pts = bounds.center + rng.uniform(-init_range / 2.0, init_range / 2.0, size=(n_points, 3))
    dist, _ = cKDTree(pts).query(pts, k=4)
    spacing = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    quats = np.zeros((n_points, 4))
    quats[:, 0] = 1.0
    cloud = GaussianCloud(
        positions=torch.from_numpy(pts).to(dtype),
        log_scales=torch.from_numpy(np.log(spacing))[:, None].expand(n_points, 3).contiguous().to(dtype),
        quaternions=torch.from_numpy(quats).to(dtype),
        opacity_logits=inverse_sigmoid(torch.full((n_points,), 0.1, dtype=torch.float64)).to(dtype),
        colors=torch.zeros(n_points, 3, dtype=dtype),
        seg_colors=torch.zeros(n_points, 3, dtype=dtype),
    )
    return cloud


def densify_and_prune(
    cloud: GaussianCloud,
    state: OptimState,
    schedule: DensifySchedule,
    bounds: SceneBounds,
    rng: np.random.Generator,
    masking: bool = True,
    sparsity: bool = True,
    max_gaussians: Optional[int] = None,
) -> tuple[GaussianCloud, OptimState]:
    """One schedule tick: clone/split high-gradient Gaussians, then prune.

    Pruning removes low-opacity and oversized Gaussians, optionally everything
    outside the subject radius (masked runs) and isolated Gaussians (sparsity).
    Adam moments and densification statistics follow every row change.
    """
    n = len(cloud)
    mean_grad = state.grad_accum / torch.clamp(state.grad_count, min=1.0)
    scales = cloud.scales().detach()
    big = scales.max(dim=1).values > schedule.split_scale_fraction * bounds.scene_extent
    hot = mean_grad > schedule.grad_threshold
    if max_gaussians is not None and n >= max_gaussians:
        hot = torch.zeros_like(hot)
    clone_mask = hot & ~big
    split_mask = hot & big

    survivors = ~split_mask
    new_parts = []
    if bool(clone_mask.any()):
        new_parts.append(cloud.select(clone_mask).clone())
    if bool(split_mask.any()):
        parents = cloud.select(split_mask)
        rot = parents.rotations().detach()
        scale = parents.scales().detach()
        children = []
        for _ in range(2):
            eps = torch.from_numpy(rng.standard_normal((len(parents), 3))).to(cloud.dtype)
            offset = torch.einsum("nij,nj->ni", rot, eps * scale)
            child = parents.clone()
            child.positions = parents.positions.detach() + offset
            child.log_scales = parents.log_scales.detach() - float(np.log(schedule.split_scale_shrink))
            children.append(child)
        new_parts.append(GaussianCloud.concat(children[0], children[1]))

    new_cloud = cloud.detach().select(survivors)
    state.select_gaussian_rows(survivors)
    for part in new_parts:
        state.append_gaussian_rows(len(part))
        new_cloud = GaussianCloud.concat(new_cloud, part.detach())

    def _prune(keep: torch.Tensor, reason: str):
        nonlocal new_cloud
        if not bool(keep.any()):
            raise EmptyCloudError(f"all Gaussians pruned ({reason})")
        if not bool(keep.all()):
            new_cloud = new_cloud.select(keep)
            state.select_gaussian_rows(keep)

    _prune(new_cloud.opacities().detach() >= schedule.opacity_prune_threshold, "low opacity")
    _prune(
        new_cloud.scales().detach().max(dim=1).values <= schedule.max_scale_fraction * bounds.scene_extent,
        "oversized scale",
    )
    if masking:
        center = torch.as_tensor(bounds.center, dtype=new_cloud.dtype)
        dist = torch.linalg.norm(new_cloud.positions.detach() - center, dim=-1)
        _prune(dist <= bounds.subject_radius, "outside subject radius")
    if sparsity and len(new_cloud) >= 2:
        keep = torch.from_numpy(_sparsity_keep_mask(new_cloud.positions.detach().numpy(), schedule.sparsity_distance))
        _prune(keep, "isolated")

    state.reset_densify_stats(len(new_cloud))
    return new_cloud.requires_grad_(), state


def resolve_bounds(dataset: MultiViewDataset, config: RunConfig) -> SceneBounds:
    return dataset.bounds(config.subject_radius, config.scene_extent)


def group_learning_rate(name: str, lrs: LearningRates, scene_extent: float) -> float:
    if name == "positions":
        return lrs.positions * scene_extent
    if name in ("camera_scales", "camera_offsets"):
        return lrs.camera_color
    if name.startswith("deform"):
        return lrs.deformation
    return getattr(lrs, name)


@dataclass
class FitResult:
    cloud: GaussianCloud
    rig: CameraRig
    state: OptimState
    metrics: list = field(default_factory=list)


def _zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def densify_tick(iteration_1based: int, schedule: DensifySchedule) -> bool:
    it = iteration_1based
    return schedule.start <= it <= schedule.end and it % schedule.interval == 0


def fit_initial_frame(
    dataset: MultiViewDataset,
    config: RunConfig,
    frame: int = 0,
    iterations: Optional[int] = None,
    out_dir=None,
) -> FitResult:
    """Fit the Gaussian scene to one frame across all training cameras.

    One training view per iteration, sampled in shuffled blocks without
    replacement; densify/prune on the configured schedule.
    """
    rng = np.random.default_rng(config.seed)
    dtype = config.torch_dtype()
    bounds = resolve_bounds(dataset, config)
    val_cam = config.val_camera if config.val_camera is not None else dataset.val_camera
    train_cams = [i for i in range(dataset.n_cameras) if i != val_cam]
    if len(train_cams) < 2:
        raise ValueError("need at least 2 training cameras")

    n_init, init_range = config.resolved_init()
    cloud = init_cloud(bounds, n_init, init_range, rng, dtype)
    if config.masking:
        cloud = prune_outside_radius(cloud, bounds)
    cloud.requires_grad_()
    rig = dataset.rig(dtype)
    rig.color_scales.requires_grad_(config.train_camera_color)
    rig.color_offsets.requires_grad_(config.train_camera_color)

    targets = {
        cam: dataset.targets_t(cam, frame, config.prep, config.masking, dtype) for cam in train_cams
    }
    state = OptimState.for_cloud(
        cloud, {"camera_scales": rig.color_scales, "camera_offsets": rig.color_offsets}, config.seed
    )
    sampler = BlockSampler(train_cams, rng)
    metrics: list = []

    n_iters = config.init_iters if iterations is None else iterations
    for it in range(n_iters):
        state.iteration = it
        cam = sampler.next()
        camera = dataset.cameras[cam]
        half_w = torch.tensor([camera.width / 2.0, camera.height / 2.0], dtype=dtype)
        target_img, target_seg, _ = targets[cam]
        frame_out, aux = render_training(
            cloud, camera, rig.color_scales[cam], rig.color_offsets[cam], config.render
        )
        l_im = image_loss(frame_out.color, target_img, config.weights.dssim)
        l_seg = seg_loss(frame_out.seg, target_seg, config.weights.dssim)
        loss = total_init_loss(l_im, l_seg, config.weights)

        params = {**cloud.tensors()}
        if config.train_camera_color:
            params["camera_scales"] = rig.color_scales
            params["camera_offsets"] = rig.color_offsets
        _zero_grads(params.values())
        loss.backward()

        with torch.no_grad():
            g2d = aux["mean2d"].grad
            if g2d is not None:
                norms = torch.linalg.norm(g2d * half_w, dim=-1)
                state.grad_accum[aux["kept_idx"]] += norms
                state.grad_count[aux["kept_idx"]] += 1.0
            for name, p in params.items():
                if p.grad is not None:
                    adam_step(p, p.grad, state.adam[name],
                              group_learning_rate(name, config.lrs, bounds.scene_extent), name=name)

        metrics.append((it, "loss_image", float(l_im)))
        metrics.append((it, "loss_seg", float(l_seg)))
        metrics.append((it, "loss_total", float(loss)))

        if densify_tick(it + 1, config.densify):
            cloud, state = densify_and_prune(
                cloud, state, config.densify, bounds, rng,
                masking=config.masking, sparsity=config.sparsity_pruning,
                max_gaussians=config.max_gaussians,
            )
        if out_dir is not None and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            cloud.save(out_dir / f"init_iter{it + 1:06d}.ckpt.npz")

    return FitResult(cloud, rig, state, metrics)

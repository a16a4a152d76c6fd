"""Differentiable splatting renderer.

Two rendering paths share one projection step:

* ``render`` — tile-binned, depth-sorted, with front-to-back early
  termination; the production path, differentiable end to end.
* ``oracle_render`` — every surviving splat evaluated at every pixel with an
  exact global depth sort and an effectively-exhaustive transmittance cutoff;
  slow and simple, used as the conformance reference.

Pixel (r, c) samples continuous image coordinates (u, v) = (c, r).  The
splat footprint has no hard per-pixel cutoff (the density is the plain
exponential everywhere), so culling and tile binning are the only
approximations; a conservative radius keeps them below 1e-5 per channel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .config import RenderConfig
from .scene import CameraModel, GaussianCloud

DEFAULT_RENDER_CONFIG = RenderConfig()


@dataclass
class RenderedFrame:
    color: torch.Tensor   # (H, W, 3), [0,1] before per-camera calibration
    seg: torch.Tensor     # (H, W, 3)
    depth: torch.Tensor   # (H, W) transmittance-weighted expected depth
    alpha: torch.Tensor   # (H, W) accumulated opacity


@dataclass
class Projected2DGaussian:
    mean2d: torch.Tensor              # (2,) pixel coordinates
    cov2d: torch.Tensor               # (2, 2) after the low-pass floor
    view_depth: float
    effective_opacity_base: float


def projection_jacobian(p_cam: torch.Tensor, fx: float, fy: float) -> torch.Tensor:
    """Jacobian (2, 3) of the pinhole projection at a camera-frame point."""
    x, y, z = p_cam[0], p_cam[1], p_cam[2]
    zero = torch.zeros((), dtype=p_cam.dtype)
    row0 = torch.stack([fx / z, zero, -fx * x / (z * z)])
    row1 = torch.stack([zero, fy / z, -fy * y / (z * z)])
    return torch.stack([row0, row1])


def project_gaussian(
    mean: torch.Tensor,
    cov: torch.Tensor,
    camera: CameraModel,
    opacity_base: float = 1.0,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
) -> Optional[Projected2DGaussian]:
    """EWA projection of one world-space Gaussian; None when culled."""
    mean = torch.as_tensor(mean)
    dtype = mean.dtype
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    t = torch.as_tensor(camera.translation, dtype=dtype)
    p_cam = rot @ mean + t
    if float(p_cam[2]) <= config.near_plane:
        return None
    jac = projection_jacobian(p_cam, camera.fx, camera.fy)
    cov_cam = rot @ torch.as_tensor(cov, dtype=dtype) @ rot.T
    cov2d = jac @ cov_cam @ jac.T + config.lowpass * torch.eye(2, dtype=dtype)
    u = camera.fx * p_cam[0] / p_cam[2] + camera.cx
    v = camera.fy * p_cam[1] / p_cam[2] + camera.cy
    mean2d = torch.stack([u, v])
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    lam_max = 0.5 * (a + c) + torch.sqrt(0.25 * (a - c) ** 2 + b * b)
    radius = config.cull_sigma * torch.sqrt(lam_max)
    if (
        float(u + radius) < 0 or float(u - radius) > camera.width - 1
        or float(v + radius) < 0 or float(v - radius) > camera.height - 1
    ):
        return None
    return Projected2DGaussian(mean2d, cov2d, float(p_cam[2]), float(opacity_base))


def composite_ray(alphas, colors, segs, depths, t_min: float = 1e-4):
    """Front-to-back compositing of one ray's depth-sorted splats.

    ``alphas`` are the per-splat alpha values (opacity times footprint
    density, already clipped by the caller where applicable).
    """
    colors = torch.as_tensor(colors, dtype=torch.float64).reshape(-1, 3)
    segs = torch.as_tensor(segs, dtype=torch.float64).reshape(-1, 3)
    alphas = torch.as_tensor(alphas, dtype=torch.float64).reshape(-1)
    depths = torch.as_tensor(depths, dtype=torch.float64).reshape(-1)
    color = torch.zeros(3, dtype=torch.float64)
    seg = torch.zeros(3, dtype=torch.float64)
    depth = torch.zeros((), dtype=torch.float64)
    acc = torch.zeros((), dtype=torch.float64)
    trans = 1.0
    for i in range(alphas.shape[0]):
        if trans < t_min:
            break
        w = trans * alphas[i]
        color = color + w * colors[i]
        seg = seg + w * segs[i]
        depth = depth + w * depths[i]
        acc = acc + w
        trans = trans * (1.0 - float(alphas[i]))
    return color, seg, depth, acc


def _project_cloud(cloud: GaussianCloud, camera: CameraModel, config: RenderConfig) -> dict:
    """Project all Gaussians; returns depth-sorted screen-space splats.

    The returned ``mean2d`` tensor is the graph node later compositing reads
    from, so callers can retain its gradient for densification statistics.
    """
    dtype = cloud.dtype
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    t = torch.as_tensor(camera.translation, dtype=dtype)
    p_cam = cloud.positions @ rot.T + t
    z = p_cam[:, 2]
    in_front = z > config.near_plane
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    u = camera.fx * p_cam[:, 0] / z_safe + camera.cx
    v = camera.fy * p_cam[:, 1] / z_safe + camera.cy

    cov_world = cloud.covariances()
    cov_cam = torch.einsum("ij,njk,lk->nil", rot, cov_world, rot)
    fx_z = camera.fx / z_safe
    fy_z = camera.fy / z_safe
    jx = -camera.fx * p_cam[:, 0] / (z_safe * z_safe)
    jy = -camera.fy * p_cam[:, 1] / (z_safe * z_safe)
    c00, c01, c02 = cov_cam[:, 0, 0], cov_cam[:, 0, 1], cov_cam[:, 0, 2]
    c11, c12, c22 = cov_cam[:, 1, 1], cov_cam[:, 1, 2], cov_cam[:, 2, 2]
    a = fx_z * fx_z * c00 + 2 * fx_z * jx * c02 + jx * jx * c22 + config.lowpass
    b = fx_z * fy_z * c01 + fx_z * jy * c02 + fy_z * jx * c12 + jx * jy * c22
    c = fy_z * fy_z * c11 + 2 * fy_z * jy * c12 + jy * jy * c22 + config.lowpass

    lam_max = 0.5 * (a + c) + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0))
    radius = config.cull_sigma * torch.sqrt(lam_max)
    rd = radius.detach()
    ud, vd = u.detach(), v.detach()
    in_image = (
        (ud + rd >= 0) & (ud - rd <= camera.width - 1)
        & (vd + rd >= 0) & (vd - rd <= camera.height - 1)
    )
    keep = in_front & in_image
    kept_idx = torch.nonzero(keep, as_tuple=False).squeeze(1)
    order = torch.argsort(z.detach()[kept_idx], stable=True)
    kept_idx = kept_idx[order]

    det = a * c - b * b
    mean2d = torch.stack([u[kept_idx], v[kept_idx]], dim=1)
    return {
        "kept_idx": kept_idx,
        "mean2d": mean2d,
        "inv_a": (c / det)[kept_idx],
        "inv_b": (-b / det)[kept_idx],
        "inv_c": (a / det)[kept_idx],
        "depth": z[kept_idx],
        "radius": rd[kept_idx],
        "base_alpha": cloud.opacities()[kept_idx],
        "rgb": cloud.rgb()[kept_idx],
        "seg_rgb": cloud.seg_rgb()[kept_idx],
    }


def _composite_block(
    pix_u: torch.Tensor,
    pix_v: torch.Tensor,
    mean2d: torch.Tensor,
    inv_a: torch.Tensor,
    inv_b: torch.Tensor,
    inv_c: torch.Tensor,
    base_alpha: torch.Tensor,
    rgb: torch.Tensor,
    seg_rgb: torch.Tensor,
    depth: torch.Tensor,
    alpha_clip: float,
    t_min: float,
):
    """Vectorized front-to-back compositing of M depth-sorted splats over P pixels."""
    dx = pix_u[None, :] - mean2d[:, 0:1]
    dy = pix_v[None, :] - mean2d[:, 1:2]
    maha = inv_a[:, None] * dx * dx + 2.0 * inv_b[:, None] * dx * dy + inv_c[:, None] * dy * dy
    alpha = torch.clamp(base_alpha[:, None] * torch.exp(-0.5 * maha), max=alpha_clip)
    trans = torch.cumprod(1.0 - alpha, dim=0)
    t_prev = torch.cat([torch.ones_like(trans[:1]), trans[:-1]], dim=0)
    include = (t_prev.detach() >= t_min).to(alpha.dtype)
    w = t_prev * alpha * include
    color = w.T @ rgb
    seg = w.T @ seg_rgb
    exp_depth = w.T @ depth.unsqueeze(1)
    acc = w.sum(dim=0)
    return color, seg, exp_depth.squeeze(1), acc


def _apply_calibration(color, color_scale, color_offset):
    if color_scale is not None:
        color = torch.exp(color_scale).reshape(1, 1, 3) * color
    if color_offset is not None:
        color = color + color_offset.reshape(1, 1, 3)
    return color


def render(
    cloud: GaussianCloud,
    camera: CameraModel,
    color_scale: Optional[torch.Tensor] = None,
    color_offset: Optional[torch.Tensor] = None,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
) -> RenderedFrame:
    frame, _ = render_training(cloud, camera, color_scale, color_offset, config)
    return frame


def render_training(
    cloud: GaussianCloud,
    camera: CameraModel,
    color_scale: Optional[torch.Tensor] = None,
    color_offset: Optional[torch.Tensor] = None,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
) -> tuple[RenderedFrame, dict]:
    """Tiled render plus the screen-space handles densification statistics need."""
    h, w = camera.height, camera.width
    if h <= 0 or w <= 0:
        raise ValueError("image dimensions must be positive")
    dtype = cloud.dtype
    proj = _project_cloud(cloud, camera, config)
    mean2d = proj["mean2d"]
    if mean2d.requires_grad:
        mean2d.retain_grad()

    ts = config.tile_size
    su, sv = mean2d[:, 0], mean2d[:, 1]
    sud, svd, rd = su.detach(), sv.detach(), proj["radius"]
    rows = []
    for y0 in range(0, h, ts):
        y1 = min(h, y0 + ts)
        row_blocks = []
        for x0 in range(0, w, ts):
            x1 = min(w, x0 + ts)
            hit = (
                (sud + rd >= x0) & (sud - rd <= x1 - 1)
                & (svd + rd >= y0) & (svd - rd <= y1 - 1)
            )
            th, tw = y1 - y0, x1 - x0
            if not bool(hit.any()):
                row_blocks.append((
                    torch.zeros(th, tw, 3, dtype=dtype), torch.zeros(th, tw, 3, dtype=dtype),
                    torch.zeros(th, tw, dtype=dtype), torch.zeros(th, tw, dtype=dtype),
                ))
                continue
            vv, uu = torch.meshgrid(
                torch.arange(y0, y1, dtype=dtype), torch.arange(x0, x1, dtype=dtype), indexing="ij"
            )
            color, seg, depth, acc = _composite_block(
                uu.reshape(-1), vv.reshape(-1),
                mean2d[hit], proj["inv_a"][hit], proj["inv_b"][hit], proj["inv_c"][hit],
                proj["base_alpha"][hit], proj["rgb"][hit], proj["seg_rgb"][hit], proj["depth"][hit],
                config.alpha_clip, config.transmittance_min,
            )
            row_blocks.append((
                color.reshape(th, tw, 3), seg.reshape(th, tw, 3),
                depth.reshape(th, tw), acc.reshape(th, tw),
            ))
        rows.append(tuple(torch.cat([blk[i] for blk in row_blocks], dim=1) for i in range(4)))
    color = torch.cat([r[0] for r in rows], dim=0)
    seg = torch.cat([r[1] for r in rows], dim=0)
    depth = torch.cat([r[2] for r in rows], dim=0)
    alpha = torch.cat([r[3] for r in rows], dim=0)
    color = _apply_calibration(color, color_scale, color_offset)
    aux = {"mean2d": mean2d, "kept_idx": proj["kept_idx"]}
    return RenderedFrame(color, seg, depth, alpha), aux


def oracle_render(
    cloud: GaussianCloud,
    camera: CameraModel,
    color_scale: Optional[torch.Tensor] = None,
    color_offset: Optional[torch.Tensor] = None,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
    splat_mask: Optional[torch.Tensor] = None,
    apply_cull: bool = True,
    pixel_chunk: int = 2048,
) -> RenderedFrame:
    """Reference renderer: all splats at all pixels, exact global depth sort.

    ``splat_mask`` restricts rendering to a subset of the cloud;
    ``apply_cull=False`` disables the footprint-misses-image cull (the
    near-plane rule always applies) for culling-soundness checks.
    """
    h, w = camera.height, camera.width
    if h <= 0 or w <= 0:
        raise ValueError("image dimensions must be positive")
    if splat_mask is not None:
        cloud = cloud.select(splat_mask)
    cfg = config
    if not apply_cull:
        cfg = RenderConfig(**{**config.__dict__, "cull_sigma": float("inf")})
        # an infinite radius never misses the image, so only the near plane culls
    dtype = cloud.dtype
    if len(cloud) == 0:
        zero3 = torch.zeros(h, w, 3, dtype=dtype)
        zero1 = torch.zeros(h, w, dtype=dtype)
        return RenderedFrame(_apply_calibration(zero3, color_scale, color_offset), zero3.clone(), zero1, zero1.clone())
    proj = _project_cloud(cloud, camera, cfg)

    vv, uu = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    us, vs = uu.reshape(-1), vv.reshape(-1)
    colors, segs, depths, accs = [], [], [], []
    for start in range(0, us.shape[0], pixel_chunk):
        color, seg, depth, acc = _composite_block(
            us[start : start + pixel_chunk], vs[start : start + pixel_chunk],
            proj["mean2d"], proj["inv_a"], proj["inv_b"], proj["inv_c"],
            proj["base_alpha"], proj["rgb"], proj["seg_rgb"], proj["depth"],
            config.alpha_clip, config.oracle_transmittance_min,
        )
        colors.append(color)
        segs.append(seg)
        depths.append(depth)
        accs.append(acc)
    color = torch.cat(colors, dim=0).reshape(h, w, 3)
    seg = torch.cat(segs, dim=0).reshape(h, w, 3)
    depth = torch.cat(depths, dim=0).reshape(h, w)
    alpha = torch.cat(accs, dim=0).reshape(h, w)
    color = _apply_calibration(color, color_scale, color_offset)
    return RenderedFrame(color, seg, depth, alpha)


def render_gradients(
    cloud: GaussianCloud,
    camera: CameraModel,
    grad_color: Optional[torch.Tensor] = None,
    grad_seg: Optional[torch.Tensor] = None,
    grad_depth: Optional[torch.Tensor] = None,
    grad_alpha: Optional[torch.Tensor] = None,
    color_scale: Optional[torch.Tensor] = None,
    color_offset: Optional[torch.Tensor] = None,
    config: RenderConfig = DEFAULT_RENDER_CONFIG,
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of the rendered frame for given upstream cotangents.

    Returns a gradient per cloud parameter array plus ``color_scale`` /
    ``color_offset`` when those were supplied.
    """
    params = {name: t.detach().clone().requires_grad_(True) for name, t in cloud.tensors().items()}
    work = GaussianCloud(**params)
    extra = {}
    if color_scale is not None:
        extra["color_scale"] = color_scale.detach().clone().requires_grad_(True)
    if color_offset is not None:
        extra["color_offset"] = color_offset.detach().clone().requires_grad_(True)
    frame = render(work, camera, extra.get("color_scale"), extra.get("color_offset"), config)
    outputs, cotangents = [], []
    for out, g in ((frame.color, grad_color), (frame.seg, grad_seg), (frame.depth, grad_depth), (frame.alpha, grad_alpha)):
        if g is not None:
            outputs.append(out)
            cotangents.append(torch.as_tensor(g, dtype=out.dtype))
    if not outputs:
        raise ValueError("at least one upstream gradient must be provided")
    leaves = {**params, **extra}
    grads = torch.autograd.grad(outputs, list(leaves.values()), grad_outputs=cotangents, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(t))
        for (name, t), g in zip(leaves.items(), grads)
    }


def frame_to_uint8(values: torch.Tensor) -> np.ndarray:
    arr = values.detach().numpy()
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image_png(values: torch.Tensor | np.ndarray, path: Path | str) -> None:
    """Write an image tensor with values in [0,1] as an 8-bit PNG."""
    if isinstance(values, torch.Tensor):
        arr = frame_to_uint8(values)
    else:
        arr = np.round(np.clip(np.asarray(values), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path: Path | str) -> np.ndarray:
    """Read an 8-bit PNG into a float64 array in [0,1]."""
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0

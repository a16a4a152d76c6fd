"""Training objectives: masked photometric loss, segmentation loss and the
three temporal regularizers tying Gaussians to their initial neighborhoods."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .config import LossWeights, NeighborConfig
from .scene import quaternion_conjugate, quaternion_multiply, quaternion_normalize

_NORM_EPS = 1e-24  # inside sqrt: keeps pairwise norms differentiable at zero

__all__ = [
    "LossWeights", "NeighborGraph", "build_neighbor_graph", "ssim", "image_loss",
    "seg_loss", "rigid_loss", "rot_loss", "iso_loss", "total_init_loss", "total_dyn_loss",
]


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords * coords) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5,
         data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM between two (H, W, C) images, Gaussian-windowed, valid padding."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ValueError("image smaller than the SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    channels = a.shape[2]
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    win = _gaussian_window(window_size, sigma, a.dtype).expand(channels, 1, window_size, window_size)
    mu_x = F.conv2d(x, win, groups=channels)
    mu_y = F.conv2d(y, win, groups=channels)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sig_x = F.conv2d(x * x, win, groups=channels) - mu_xx
    sig_y = F.conv2d(y * y, win, groups=channels) - mu_yy
    sig_xy = F.conv2d(x * y, win, groups=channels) - mu_xy
    num = (2 * mu_xy + c1) * (2 * sig_xy + c2)
    den = (mu_xx + mu_yy + c1) * (sig_x + sig_y + c2)
    return (num / den).mean()


def image_loss(rendered: torch.Tensor, target: torch.Tensor, dssim_weight: float = 0.2) -> torch.Tensor:
    """(1 - w) L1 + w D-SSIM between (H, W, 3) images."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    dssim = (1.0 - ssim(rendered, target)) / 2.0
    return (1.0 - dssim_weight) * l1 + dssim_weight * dssim


def seg_loss(rendered_seg: torch.Tensor, target_seg: torch.Tensor, dssim_weight: float = 0.2) -> torch.Tensor:
    """Same objective as the image loss, applied to the segmentation channels."""
    return image_loss(rendered_seg, target_seg, dssim_weight)


@dataclass
class NeighborGraph:
    """k nearest neighbors per Gaussian, frozen from initial-frame positions."""

    indices: torch.Tensor   # (N, k) int64
    weights: torch.Tensor   # (N, k), exp(-falloff * d0^2)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def build_neighbor_graph(positions: torch.Tensor, k: int = 20, weight_falloff: float = 2000.0) -> NeighborGraph:
    """Exact kNN by Euclidean distance; ties broken toward the lowest index."""
    pos = positions.detach()
    n = pos.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    pts = pos.numpy().astype(np.float64)
    dist, idx = cKDTree(pts).query(pts, k=k + 1)
    # drop self-matches, then enforce deterministic (distance, index) ordering
    rows = []
    for i in range(n):
        cand = [(float(dist[i, j]), int(idx[i, j])) for j in range(k + 1) if int(idx[i, j]) != i]
        cand.sort()
        rows.append([j for _, j in cand[:k]])
    indices = torch.tensor(rows, dtype=torch.int64)
    d0 = torch.linalg.norm(pos[indices] - pos[:, None, :], dim=-1)
    weights = torch.exp(-weight_falloff * d0 * d0)
    return NeighborGraph(indices, weights.to(positions.dtype))


def _pairwise_norm(v: torch.Tensor) -> torch.Tensor:
    return torch.sqrt((v * v).sum(dim=-1) + _NORM_EPS)


def rigid_loss(
    mu_prev: torch.Tensor,
    mu_curr: torch.Tensor,
    q_prev: torch.Tensor,
    q_curr: torch.Tensor,
    graph: NeighborGraph,
) -> torch.Tensor:
    """Local-rigidity residual: neighbor offsets must rotate with each Gaussian."""
    from .scene import quaternions_to_rotations

    idx = graph.indices
    d_prev = mu_prev[idx] - mu_prev[:, None, :]
    d_curr = mu_curr[idx] - mu_curr[:, None, :]
    r_prev = quaternions_to_rotations(q_prev)
    r_curr = quaternions_to_rotations(q_curr)
    rel = r_prev @ r_curr.transpose(-1, -2)          # rotation from t to t-1 frame
    d_back = torch.einsum("nij,nkj->nki", rel, d_curr)
    return (graph.weights * _pairwise_norm(d_prev - d_back)).mean()


def rot_loss(q_prev: torch.Tensor, q_curr: torch.Tensor, graph: NeighborGraph) -> torch.Tensor:
    """Neighbors must share each Gaussian's relative rotation between timesteps."""
    qp = quaternion_normalize(q_prev)
    qc = quaternion_normalize(q_curr)
    rel = quaternion_multiply(qc, quaternion_conjugate(qp))  # (N, 4)
    diff = rel[graph.indices] - rel[:, None, :]
    return (graph.weights * _pairwise_norm(diff)).mean()


def iso_loss(mu_init: torch.Tensor, mu_curr: torch.Tensor, graph: NeighborGraph) -> torch.Tensor:
    """Isometry residual: neighbor distances must match the initial frame."""
    idx = graph.indices
    d0 = _pairwise_norm(mu_init[idx] - mu_init[:, None, :])
    dt = _pairwise_norm(mu_curr[idx] - mu_curr[:, None, :])
    return (graph.weights * (d0 - dt).abs()).mean()


def total_init_loss(l_im: torch.Tensor, l_seg: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return weights.image * l_im + weights.seg * l_seg


def total_dyn_loss(
    l_im: torch.Tensor,
    l_seg: torch.Tensor,
    l_rigid: torch.Tensor,
    l_rot: torch.Tensor,
    l_iso: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    return (
        weights.image * l_im + weights.seg * l_seg
        + weights.rigid * l_rigid + weights.rot * l_rot + weights.iso * l_iso
    )

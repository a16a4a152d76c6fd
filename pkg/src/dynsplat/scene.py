"""Gaussian scene representation and camera geometry.

Storage conventions: opacity and both color channels are stored pre-sigmoid,
scales as log-meters and quaternions unnormalized (scalar-first w, x, y, z);
the activation is applied wherever the effective value is needed, so every
stored array is a free optimization variable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

CLOUD_FORMAT_VERSION = 1
CLOUD_FIELDS = ("positions", "log_scales", "quaternions", "opacity_logits", "colors", "seg_colors")


class EmptyCloudError(RuntimeError):
    """An operation left the scene without any Gaussians."""


def inverse_sigmoid(x: torch.Tensor | float) -> torch.Tensor:
    x = torch.as_tensor(x)
    return torch.log(x / (1.0 - x))


def quaternion_normalize(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion(s) from unnormalized storage; zero norm is an error."""
    norm = torch.linalg.norm(q, dim=-1, keepdim=True)
    if not bool((norm > 0).all()):
        raise ValueError("zero-norm quaternion cannot be normalized")
    return q / norm


def quaternions_to_rotations(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from quaternions (..., 4), scalar-first."""
    q = quaternion_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """3x3 rotation matrix of a single quaternion (normalized first)."""
    q = torch.as_tensor(q)
    if q.shape != (4,):
        raise ValueError(f"expected a 4-vector, got shape {tuple(q.shape)}")
    return quaternions_to_rotations(q)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a*b for (..., 4) scalar-first quaternions."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quaternion_conjugate(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion from a 3x3 rotation matrix (numpy)."""
    m = np.asarray(r, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def covariance(log_scale: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """World covariance R S S^T R^T from log-scales (..., 3) and quaternions (..., 4)."""
    rot = quaternions_to_rotations(torch.as_tensor(q))
    scale = torch.exp(torch.as_tensor(log_scale))
    rs = rot * scale.unsqueeze(-2)  # columns of R scaled: R @ diag(S)
    return rs @ rs.transpose(-1, -2)


def evaluate_gaussian(x: torch.Tensor, mean: torch.Tensor, cov: torch.Tensor, opacity_logit) -> torch.Tensor:
    """Influence sigma(o) * exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)) of one Gaussian at x."""
    x = torch.as_tensor(x)
    mean = torch.as_tensor(mean)
    d = (x - mean).reshape(3, 1)
    sol = torch.linalg.solve(torch.as_tensor(cov), d)
    maha = (d * sol).sum()
    return torch.sigmoid(torch.as_tensor(opacity_logit, dtype=maha.dtype)) * torch.exp(-0.5 * maha)


@dataclass
class SceneBounds:
    center: np.ndarray                 # (3,) meters, calibration center
    subject_radius: float = 2.0
    scene_extent: float = 1.0          # scales learning rates and prune thresholds

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.subject_radius <= 0 or self.scene_extent <= 0:
            raise ValueError("subject_radius and scene_extent must be positive")


@dataclass
class GaussianCloud:
    """Structure-of-arrays scene of N Gaussians (torch tensors, shared dtype)."""

    positions: torch.Tensor       # (N, 3) meters, world frame
    log_scales: torch.Tensor      # (N, 3) log-meters
    quaternions: torch.Tensor     # (N, 4) unnormalized, (w, x, y, z)
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor          # (N, 3) pre-sigmoid
    seg_colors: torch.Tensor      # (N, 3) pre-sigmoid

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3), "log_scales": (n, 3), "quaternions": (n, 4),
            "opacity_logits": (n,), "colors": (n, 3), "seg_colors": (n, 3),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if tuple(t.shape) != shape:
                raise ValueError(f"{name} has shape {tuple(t.shape)}, expected {shape}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    def validate(self) -> None:
        for name in CLOUD_FIELDS:
            t = getattr(self, name)
            if not bool(torch.isfinite(t).all()):
                raise ValueError(f"non-finite values in {name}")
        qn = torch.linalg.norm(self.quaternions, dim=-1)
        if not bool((qn > 0).all()):
            raise ValueError("zero-norm quaternion in cloud")

    # effective (activated) values -------------------------------------------------
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def rgb(self) -> torch.Tensor:
        return torch.sigmoid(self.colors)

    def seg_rgb(self) -> torch.Tensor:
        return torch.sigmoid(self.seg_colors)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def rotations(self) -> torch.Tensor:
        return quaternions_to_rotations(self.quaternions)

    def covariances(self) -> torch.Tensor:
        return covariance(self.log_scales, self.quaternions)

    # structural ops ----------------------------------------------------------------
    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in CLOUD_FIELDS}

    def map(self, fn) -> "GaussianCloud":
        return GaussianCloud(**{name: fn(t) for name, t in self.tensors().items()})

    def detach(self) -> "GaussianCloud":
        return self.map(lambda t: t.detach())

    def clone(self) -> "GaussianCloud":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return self.map(lambda t: t.detach().to(dtype))

    def select(self, index: torch.Tensor) -> "GaussianCloud":
        """Subset by boolean mask or index tensor, preserving order."""
        return self.map(lambda t: t[index])

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for t in self.tensors().values():
            t.requires_grad_(flag)
        return self

    @staticmethod
    def concat(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(**{
            name: torch.cat([getattr(a, name), getattr(b, name)], dim=0) for name in CLOUD_FIELDS
        })

    # checkpoint IO ------------------------------------------------------------------
    def save(self, path: Path | str) -> None:
        """Bit-exact npz checkpoint: version tag, N and the six arrays in order."""
        arrays = {name: getattr(self, name).detach().numpy() for name in CLOUD_FIELDS}
        np.savez(path, version=np.int64(CLOUD_FORMAT_VERSION), count=np.int64(len(self)), **arrays)

    @staticmethod
    def load(path: Path | str) -> "GaussianCloud":
        with np.load(path) as data:
            version = int(data["version"])
            if version != CLOUD_FORMAT_VERSION:
                raise ValueError(f"unsupported cloud checkpoint version {version}")
            tensors = {name: torch.from_numpy(data[name].copy()) for name in CLOUD_FIELDS}
        cloud = GaussianCloud(**tensors)
        if len(cloud) != int(data["count"]):
            raise ValueError("cloud checkpoint count does not match array length")
        return cloud


def prune_outside_radius(cloud: GaussianCloud, bounds: SceneBounds) -> GaussianCloud:
    """Drop Gaussians farther than subject_radius from the scene center."""
    center = torch.as_tensor(bounds.center, dtype=cloud.dtype)
    dist = torch.linalg.norm(cloud.positions.detach() - center, dim=-1)
    keep = dist <= bounds.subject_radius
    if not bool(keep.any()):
        raise EmptyCloudError("all Gaussians pruned: none within the subject radius")
    if bool(keep.all()):
        return cloud
    return cloud.select(keep)


@dataclass
class CameraModel:
    """Pinhole camera with one radial distortion coefficient.

    ``rotation`` is world-to-camera; a world point maps to
    ``rotation @ p + translation`` in the camera frame (+z forward).
    Rendering itself is distortion-free; k1 only drives image undistortion.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,) meters
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-frame depths of world points (M, 3)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = p @ self.rotation.T + self.translation
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


@dataclass
class CameraRig:
    """Cameras plus the learnable per-camera color calibration."""

    cameras: list
    color_scales: torch.Tensor    # (C, 3) pre-exponential
    color_offsets: torch.Tensor   # (C, 3)

    def __post_init__(self):
        c = len(self.cameras)
        if self.color_scales.shape != (c, 3) or self.color_offsets.shape != (c, 3):
            raise ValueError("one color scale/offset pair required per camera")

    def __len__(self) -> int:
        return len(self.cameras)

    @staticmethod
    def from_cameras(cameras: list, dtype: torch.dtype = torch.float64) -> "CameraRig":
        c = len(cameras)
        return CameraRig(cameras, torch.zeros(c, 3, dtype=dtype), torch.zeros(c, 3, dtype=dtype))

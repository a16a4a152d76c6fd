"""Dataset ingestion: calibration files, undistortion and mask preprocessing.

Dataset layout::

    dataset/
      calibration.json
      cam{ID}/frame{T:06}.png   8-bit RGB
      cam{ID}/mask{T:06}.png    8-bit single-channel class-index raster, 0 = background

Preprocessing (undistortion, largest-component masking, segmentation
colorization) is pure; results can be cached to disk keyed by a content hash
of the inputs and parameters.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .config import PrepConfig
from .scene import CameraModel, CameraRig, SceneBounds

CALIBRATION_VERSION = 1


def save_calibration(
    cameras: list[CameraModel],
    scene_center: np.ndarray,
    path: Path | str,
    subject_radius: float = 2.0,
    val_camera: int = 0,
) -> None:
    data = {
        "version": CALIBRATION_VERSION,
        "scene_center": [float(v) for v in np.asarray(scene_center).reshape(3)],
        "subject_radius": float(subject_radius),
        "val_camera": int(val_camera),
        "cameras": [
            {
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "k1": cam.k1,
                "rotation": cam.rotation.tolist(),
                "translation": cam.translation.tolist(),
                "width": cam.width, "height": cam.height,
            }
            for cam in cameras
        ],
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def load_calibration(path: Path | str) -> tuple[list[CameraModel], np.ndarray, float, int]:
    """Cameras, scene center, subject radius and validation-camera index."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"calibration file does not exist: {path}")
    data = json.loads(path.read_text())
    if int(data.get("version", -1)) != CALIBRATION_VERSION:
        raise ValueError(f"unsupported calibration version {data.get('version')}")
    cameras = []
    for entry in data["cameras"]:
        rot = np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation not orthonormal within 1e-6 (deviation {err:.3e})")
        cameras.append(CameraModel(
            fx=float(entry["fx"]), fy=float(entry["fy"]),
            cx=float(entry["cx"]), cy=float(entry["cy"]), k1=float(entry["k1"]),
            rotation=_orthonormalize(rot),
            translation=np.asarray(entry["translation"], dtype=np.float64),
            width=int(entry["width"]), height=int(entry["height"]),
        ))
    if len(cameras) < 2:
        raise ValueError("calibration must contain at least 2 cameras")
    center = np.asarray(data["scene_center"], dtype=np.float64)
    return cameras, center, float(data.get("subject_radius", 2.0)), int(data.get("val_camera", 0))


def undistort_image(image: np.ndarray, camera: CameraModel, interpolation: str = "bilinear") -> np.ndarray:
    """Resample onto the undistorted grid of the camera's pinhole model.

    The output pixel at undistorted coordinate samples the raw image at the
    radially distorted coordinate x_d = x_u (1 + k1 r_u^2) in normalized
    coordinates.  Out-of-bounds samples are black.  Masks (class rasters) use
    nearest-neighbor interpolation so labels never blend.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xu = (u - camera.cx) / camera.fx
    yu = (v - camera.cy) / camera.fy
    factor = 1.0 + camera.k1 * (xu * xu + yu * yu)
    ud = xu * factor * camera.fx + camera.cx
    vd = yu * factor * camera.fy + camera.cy

    flat_shape = (h, w) if image.ndim == 2 else (h, w, image.shape[2])
    out = np.zeros(flat_shape, dtype=image.dtype if interpolation == "nearest" else np.float64)
    if interpolation == "nearest":
        ui = np.round(ud).astype(np.int64)
        vi = np.round(vd).astype(np.int64)
        valid = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        out[valid] = image[vi[valid], ui[valid]]
        return out
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation '{interpolation}'")
    u0 = np.floor(ud).astype(np.int64)
    v0 = np.floor(vd).astype(np.int64)
    fu = ud - u0
    fv = vd - v0
    acc = np.zeros(flat_shape, dtype=np.float64)
    for dv, du, wgt in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)), (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
        uu = u0 + du
        vv = v0 + dv
        valid = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        sample = np.zeros(flat_shape, dtype=np.float64)
        sample[valid] = image[vv[valid], uu[valid]]
        acc += sample * (wgt if image.ndim == 2 else wgt[..., None])
    return acc


def remap_classes(mask: np.ndarray, remap: dict[int, int]) -> np.ndarray:
    out = np.asarray(mask).copy()
    for src, dst in remap.items():
        out[mask == src] = dst
    return out


def largest_component_mask(mask: np.ndarray, person_class: int, connectivity: int = 4) -> np.ndarray:
    """Largest connected component of person-class pixels; empty mask if none."""
    binary = np.asarray(mask) == person_class
    if not binary.any():
        return np.zeros_like(binary)
    if connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=np.int64)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = ndimage.label(binary, structure=structure)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    mask = np.asarray(mask).astype(image.dtype if image.dtype.kind == "f" else np.float64)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: image {image.shape[:2]} vs mask {mask.shape}")
    return image * (mask[..., None] if image.ndim == 3 else mask)


def make_palette(n_classes: int = 150, seed: int = 77) -> np.ndarray:
    """(n_classes + 1, 3) colors in [0.1, 0.95]; row 0 (background) is black."""
    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.1, 0.95, size=(n_classes + 1, 3))
    palette[0] = 0.0
    return palette


def colorize_segmentation(mask: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Per-pixel palette lookup producing a float RGB target, black background."""
    mask = np.asarray(mask).astype(np.int64)
    if mask.min() < 0 or mask.max() >= palette.shape[0]:
        raise ValueError("mask contains class ids outside the palette")
    return palette[mask]


@dataclass
class FrameTargets:
    image: np.ndarray         # (H, W, 3) float, masked when masking is enabled
    seg: np.ndarray           # (H, W, 3) float colorized segmentation target
    subject_mask: np.ndarray  # (H, W) bool, largest person component


class MultiViewDataset:
    """Per-camera per-frame images, class masks and derived training targets."""

    def __init__(
        self,
        root: Path,
        cameras: list[CameraModel],
        scene_center: np.ndarray,
        subject_radius: float,
        val_camera: int,
        n_frames: int,
        cache_dir: Optional[Path] = None,
    ):
        self.root = Path(root)
        self.cameras = cameras
        self.scene_center = np.asarray(scene_center, dtype=np.float64)
        self.subject_radius = subject_radius
        self.val_camera = val_camera
        self.n_frames = n_frames
        self.cache_dir = Path(cache_dir) if cache_dir else None

    # ---------------------------------------------------------------- loading
    @staticmethod
    def load(root: Path | str, cache_dir: Optional[Path | str] = None) -> "MultiViewDataset":
        root = Path(root)
        if not root.exists():
            raise FileNotFoundError(f"dataset path does not exist: {root}")
        cameras, center, radius, val_cam = load_calibration(root / "calibration.json")
        frames = sorted((root / "cam0").glob("frame*.png"))
        if not frames:
            raise FileNotFoundError(f"no frames found under {root / 'cam0'}")
        return MultiViewDataset(root, cameras, center, radius, val_cam, len(frames), cache_dir)

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def rig(self, dtype: torch.dtype = torch.float64) -> CameraRig:
        return CameraRig.from_cameras(self.cameras, dtype)

    def bounds(self, subject_radius: Optional[float] = None, scene_extent: Optional[float] = None) -> SceneBounds:
        if scene_extent is None:
            dists = [np.linalg.norm(cam.center() - self.scene_center) for cam in self.cameras]
            scene_extent = 1.1 * float(max(dists))
        return SceneBounds(self.scene_center, subject_radius or self.subject_radius, scene_extent)

    def _frame_path(self, cam: int, frame: int) -> Path:
        return self.root / f"cam{cam}" / f"frame{frame:06d}.png"

    def _mask_path(self, cam: int, frame: int) -> Path:
        return self.root / f"cam{cam}" / f"mask{frame:06d}.png"

    def image(self, cam: int, frame: int) -> np.ndarray:
        path = self._frame_path(cam, frame)
        if not path.exists():
            raise FileNotFoundError(f"frame image does not exist: {path}")
        return np.asarray(Image.open(path), dtype=np.float64) / 255.0

    def mask(self, cam: int, frame: int) -> np.ndarray:
        path = self._mask_path(cam, frame)
        if not path.exists():
            raise FileNotFoundError(f"mask image does not exist: {path}")
        return np.asarray(Image.open(path), dtype=np.uint8)

    # ---------------------------------------------------------- preprocessing
    def _cache_key(self, cam: int, frame: int, prep: PrepConfig, masking: bool) -> str:
        h = hashlib.sha256()
        h.update(self._frame_path(cam, frame).read_bytes())
        h.update(self._mask_path(cam, frame).read_bytes())
        h.update(json.dumps(dataclasses.asdict(prep), sort_keys=True).encode())
        h.update(f"masking={masking};k1={self.cameras[cam].k1}".encode())
        return h.hexdigest()

    def targets(self, cam: int, frame: int, prep: PrepConfig, masking: bool) -> FrameTargets:
        """Undistorted, mask-derived training targets for one view."""
        if self.cache_dir is not None:
            key = self._cache_key(cam, frame, prep, masking)
            cached = self.cache_dir / f"{key}.npz"
            if cached.exists():
                with np.load(cached) as data:
                    return FrameTargets(data["image"], data["seg"], data["subject_mask"])
        camera = self.cameras[cam]
        image = undistort_image(self.image(cam, frame), camera)
        mask = undistort_image(self.mask(cam, frame), camera, interpolation="nearest")
        mask = remap_classes(mask, prep.class_remap)
        subject = largest_component_mask(mask, prep.person_class, prep.connectivity)
        palette = make_palette(prep.n_classes, prep.palette_seed)
        seg = colorize_segmentation(mask, palette)
        if masking:
            image = apply_mask(image, subject)
            if prep.seg_target_masked:
                seg = apply_mask(seg, subject)
        result = FrameTargets(image, seg, subject)
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            np.savez(self.cache_dir / f"{key}.npz", image=result.image, seg=result.seg, subject_mask=result.subject_mask)
        return result

    def targets_t(self, cam: int, frame: int, prep: PrepConfig, masking: bool, dtype: torch.dtype):
        t = self.targets(cam, frame, prep, masking)
        return (
            torch.from_numpy(np.ascontiguousarray(t.image)).to(dtype),
            torch.from_numpy(np.ascontiguousarray(t.seg)).to(dtype),
            torch.from_numpy(np.ascontiguousarray(t.subject_mask)),
        )

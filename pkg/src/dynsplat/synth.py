"""Synthetic multi-camera datasets with exact ground truth.

Scenes are Gaussian clouds by construction, rendered to disk with the
brute-force oracle renderer (never the tiled production path), with masks
derived from the subject's alpha footprint and the scripted motion written
alongside as the tracking ground truth.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import PrepConfig, RenderConfig
from .ingest import make_palette, save_calibration
from .render import oracle_render, save_image_png
from .scene import (
    CameraModel,
    GaussianCloud,
    SceneBounds,
    inverse_sigmoid,
    quaternion_multiply,
    rotation_to_quaternion,
)

DEFAULT_CLUTTER_CLASS = 4  # arbitrary non-person label for background clutter


@dataclass
class MotionScript:
    """Scripted subject motion; evaluable at fractional frame times."""

    kind: str = "static"                      # static | translate | rotate | articulate
    velocity: tuple = (0.0, 0.0, 0.0)         # m/frame, translate
    axis: tuple = (0.0, 0.0, 1.0)             # rotate / articulate
    rate: float = 0.0                         # rad/frame, rotate
    pivot: tuple = (0.0, 0.0, 0.0)            # rotate / articulate, world frame
    amplitude: float = 0.0                    # rad, articulate swing amplitude
    period: float = 40.0                      # frames, articulate swing period
    duration: int = 1                         # frames in the dataset

    def hinge_angle(self, frame: float) -> float:
        return self.amplitude * np.sin(2.0 * np.pi * frame / self.period)


def _axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def _rotate_subset(cloud: GaussianCloud, mask: np.ndarray, rot: np.ndarray, pivot: np.ndarray) -> None:
    idx = torch.from_numpy(np.flatnonzero(mask))
    r = torch.as_tensor(rot, dtype=cloud.dtype)
    p = torch.as_tensor(pivot, dtype=cloud.dtype)
    cloud.positions[idx] = (cloud.positions[idx] - p) @ r.T + p
    q_rot = torch.as_tensor(rotation_to_quaternion(rot), dtype=cloud.dtype)
    cloud.quaternions[idx] = quaternion_multiply(q_rot.expand(len(idx), 4), cloud.quaternions[idx])


def apply_script(
    cloud: GaussianCloud,
    subject_mask: np.ndarray,
    segment_labels: np.ndarray,
    script: MotionScript,
    frame: float,
) -> GaussianCloud:
    """Ground-truth cloud state at a (possibly fractional) frame time."""
    out = cloud.clone()
    if script.kind == "static":
        return out
    if script.kind == "translate":
        shift = torch.as_tensor(np.asarray(script.velocity) * frame, dtype=out.dtype)
        idx = torch.from_numpy(np.flatnonzero(subject_mask))
        out.positions[idx] = out.positions[idx] + shift
        return out
    if script.kind == "rotate":
        rot = _axis_angle_matrix(script.axis, script.rate * frame)
        _rotate_subset(out, subject_mask, rot, np.asarray(script.pivot))
        return out
    if script.kind == "articulate":
        rot = _axis_angle_matrix(script.axis, script.hinge_angle(frame))
        limb = subject_mask & (segment_labels == 1)
        _rotate_subset(out, limb, rot, np.asarray(script.pivot))
        return out
    raise ValueError(f"unknown motion script kind '{script.kind}'")


@dataclass
class SceneSpec:
    """Generator settings for one synthetic dataset."""

    seed: int = 0
    n_subject: int = 400
    n_clutter: int = 0
    clutter_inner: float = 2.3        # clutter shell radii, meters
    clutter_outer: float = 4.0
    n_cameras: int = 8
    rig_radius: float = 2.4
    rig_height: float = 1.3
    image_width: int = 64
    image_height: int = 64
    fov_scale: float = 0.28           # tangent of the half horizontal field of view
    val_camera: int = 0
    subject_radius: float = 2.0
    n_frames: int = 1
    script: MotionScript = field(default_factory=MotionScript)
    center: tuple = (0.0, 0.0, 0.0)
    person_class: int = 13
    clutter_class: int = DEFAULT_CLUTTER_CLASS
    texture_frequency: float = 18.0   # rad/m of the color field
    subject_opacity: float = 0.92
    limb_offset: tuple = (0.16, 0.0, 0.05)   # hinge pivot relative to center

    @staticmethod
    def from_json(path: Path | str) -> "SceneSpec":
        data = json.loads(Path(path).read_text())
        if "script" in data and isinstance(data["script"], dict):
            data["script"] = MotionScript(**data["script"])
        known = {f.name for f in dataclasses.fields(SceneSpec)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
        return SceneSpec(**data)

    def to_json(self, path: Path | str) -> None:
        data = dataclasses.asdict(self)
        Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _mean_knn_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    from scipy.spatial import cKDTree

    if points.shape[0] <= k:
        return np.full(points.shape[0], 0.05)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return dist[:, 1:].mean(axis=1)


def _texture_colors(points: np.ndarray, rng: np.random.Generator, frequency: float) -> np.ndarray:
    """Smooth spatially correlated color field in (0.1, 0.9)."""
    colors = np.zeros((points.shape[0], 3))
    for ch in range(3):
        omega = rng.normal(size=3)
        omega *= frequency / np.linalg.norm(omega)
        phase = rng.uniform(0, 2 * np.pi)
        colors[:, ch] = 0.5 + 0.4 * np.sin(points @ omega + phase)
    return np.clip(colors, 0.1, 0.9)


def generate_scene(spec: SceneSpec) -> tuple[GaussianCloud, np.ndarray, np.ndarray]:
    """Ground-truth cloud, subject mask and per-Gaussian segment labels.

    The subject is a torso ellipsoid plus a limb lobe hanging off the hinge
    pivot (segment 1), so articulation scripts have something to articulate.
    Colors are a smooth random field: textured enough to localize geometry.
    """
    rng = np.random.default_rng(spec.seed)
    center = np.asarray(spec.center, dtype=np.float64)
    pivot = center + np.asarray(spec.limb_offset)

    n_torso = spec.n_subject - spec.n_subject // 3
    n_limb = spec.n_subject - n_torso
    torso_axes = np.array([0.20, 0.13, 0.10])
    u = rng.normal(size=(n_torso, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.uniform(0, 1, size=(n_torso, 1)) ** (1 / 3)
    torso = center + u * r * torso_axes

    t = rng.uniform(0, 1, size=(n_limb, 1))
    limb_dir = np.array([1.0, 0.15, 0.35])
    limb_dir /= np.linalg.norm(limb_dir)
    radial = rng.normal(size=(n_limb, 3)) * 0.035
    limb = pivot + t * limb_dir * 0.34 + radial

    subject_pts = np.concatenate([torso, limb], axis=0)
    segment_labels = np.concatenate([np.zeros(n_torso, dtype=np.int64), np.ones(n_limb, dtype=np.int64)])

    points = [subject_pts]
    labels = [segment_labels]
    if spec.n_clutter > 0:
        u = rng.normal(size=(spec.n_clutter, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        rad = rng.uniform(spec.clutter_inner, spec.clutter_outer, size=(spec.n_clutter, 1))
        clutter = center + u * rad
        points.append(clutter)
        labels.append(np.full(spec.n_clutter, -1, dtype=np.int64))
    pts = np.concatenate(points, axis=0)
    segment_labels = np.concatenate(labels, axis=0)
    subject_mask = np.arange(pts.shape[0]) < spec.n_subject

    scales = np.empty((pts.shape[0], 3))
    subj_spacing = _mean_knn_distance(subject_pts)
    scales[subject_mask] = (0.7 * subj_spacing)[:, None]
    if spec.n_clutter > 0:
        scales[~subject_mask] = rng.uniform(0.08, 0.18, size=(spec.n_clutter, 1))

    colors = np.empty((pts.shape[0], 3))
    colors[subject_mask] = _texture_colors(subject_pts, rng, spec.texture_frequency)
    if spec.n_clutter > 0:
        colors[~subject_mask] = rng.uniform(0.15, 0.85, size=(spec.n_clutter, 3))

    palette = make_palette()
    seg_rgb = np.empty((pts.shape[0], 3))
    seg_rgb[subject_mask] = np.clip(palette[spec.person_class], 0.05, 0.95)
    if spec.n_clutter > 0:
        seg_rgb[~subject_mask] = np.clip(palette[spec.clutter_class], 0.05, 0.95)

    quats = rng.normal(size=(pts.shape[0], 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    opacity = np.full(pts.shape[0], spec.subject_opacity)
    if spec.n_clutter > 0:
        opacity[~subject_mask] = 0.75

    cloud = GaussianCloud(
        positions=torch.from_numpy(pts),
        log_scales=torch.from_numpy(np.log(scales)),
        quaternions=torch.from_numpy(quats),
        opacity_logits=inverse_sigmoid(torch.from_numpy(opacity)),
        colors=inverse_sigmoid(torch.from_numpy(colors)),
        seg_colors=inverse_sigmoid(torch.from_numpy(seg_rgb)),
    )
    return cloud, subject_mask, segment_labels


def look_at_camera(
    position: np.ndarray,
    target: np.ndarray,
    fx: float,
    fy: float,
    width: int,
    height: int,
    up: np.ndarray = np.array([0.0, 0.0, 1.0]),
) -> CameraModel:
    forward = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ np.asarray(position, dtype=np.float64)
    return CameraModel(
        fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, k1=0.0,
        rotation=rotation, translation=translation, width=width, height=height,
    )


def save_mask_png(mask: np.ndarray, path: Path | str) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(mask).astype(np.uint8), mode="L").save(path)


def generate_rig(spec: SceneSpec) -> list[CameraModel]:
    """Evenly spaced camera ring aimed at the scene center, k1 = 0.

    ``fov_scale`` is the tangent of the half horizontal field of view.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    fx = (spec.image_width / 2.0) / spec.fov_scale
    cameras = []
    for i in range(spec.n_cameras):
        angle = 2.0 * np.pi * i / spec.n_cameras
        pos = center + np.array([
            spec.rig_radius * np.cos(angle), spec.rig_radius * np.sin(angle), spec.rig_height,
        ])
        cameras.append(look_at_camera(pos, center, fx, fx, spec.image_width, spec.image_height))
    return cameras


def render_dataset(spec: SceneSpec, out_dir: Path | str, render_config: RenderConfig = RenderConfig()) -> Path:
    """Generate and write a full dataset in the ingest layout.

    Writes per-camera frames and class masks, the calibration file, ground
    truth trajectory CSV, the canonical cloud and the scene spec itself.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cloud, subject_mask, segment_labels = generate_scene(spec)
    cameras = generate_rig(spec)

    save_calibration(cameras, np.asarray(spec.center), out / "calibration.json",
                     subject_radius=spec.subject_radius, val_camera=spec.val_camera)
    spec.to_json(out / "scene_meta.json")
    cloud.save(out / "gt_cloud.npz")
    np.savez(out / "gt_labels.npz", subject_mask=subject_mask, segment_labels=segment_labels)

    subj_idx = torch.from_numpy(subject_mask)
    clutter_idx = torch.from_numpy(~subject_mask)
    traj_rows = []
    for cam_id in range(len(cameras)):
        (out / f"cam{cam_id}").mkdir(exist_ok=True)
    for f in range(spec.n_frames):
        state = apply_script(cloud, subject_mask, segment_labels, spec.script, float(f))
        subj_pos = state.positions[subj_idx].numpy()
        for gid in range(subj_pos.shape[0]):
            traj_rows.append((gid, f, *subj_pos[gid]))
        for cam_id, camera in enumerate(cameras):
            with torch.no_grad():
                frame = oracle_render(state, camera, config=render_config)
                subj_alpha = oracle_render(state, camera, config=render_config, splat_mask=subj_idx).alpha
                mask = np.zeros((camera.height, camera.width), dtype=np.uint8)
                if spec.n_clutter > 0:
                    clut_alpha = oracle_render(state, camera, config=render_config, splat_mask=clutter_idx).alpha
                    mask[(clut_alpha > 0.5).numpy()] = spec.clutter_class
                mask[(subj_alpha > 0.5).numpy()] = spec.person_class
            save_image_png(frame.color, out / f"cam{cam_id}" / f"frame{f:06d}.png")
            save_mask_png(mask, out / f"cam{cam_id}" / f"mask{f:06d}.png")
    with (out / "gt_trajectory.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gaussian_id", "frame", "x", "y", "z"])
        for row in traj_rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])
    return out


def load_scene(root: Path | str) -> tuple[SceneSpec, GaussianCloud, np.ndarray, np.ndarray]:
    """Reload the generator ground truth written next to a synthetic dataset."""
    root = Path(root)
    spec = SceneSpec.from_json(root / "scene_meta.json")
    cloud = GaussianCloud.load(root / "gt_cloud.npz")
    with np.load(root / "gt_labels.npz") as data:
        subject_mask = data["subject_mask"]
        segment_labels = data["segment_labels"]
    return spec, cloud, subject_mask, segment_labels

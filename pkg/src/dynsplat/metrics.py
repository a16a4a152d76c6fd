"""Evaluation: masked PSNR, per-frame metric curves and the ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .config import RunConfig  # noqa: E402
from .ingest import MultiViewDataset  # noqa: E402
from .render import render  # noqa: E402
from .scene import CameraRig, GaussianCloud  # noqa: E402


def masked_psnr(rendered, target, mask) -> Optional[float]:
    """PSNR over in-mask pixels and channels; None for an empty mask, inf for MSE 0.

    Inputs are (H, W, 3) arrays with values in [0, 1] and an (H, W) boolean mask.
    """
    r = np.asarray(rendered.detach() if isinstance(rendered, torch.Tensor) else rendered, dtype=np.float64)
    t = np.asarray(target.detach() if isinstance(target, torch.Tensor) else target, dtype=np.float64)
    m = np.asarray(mask.detach() if isinstance(mask, torch.Tensor) else mask, dtype=bool)
    if r.shape != t.shape or r.shape[:2] != m.shape:
        raise ValueError("rendered, target and mask shapes do not agree")
    if not m.any():
        return None
    diff = r[m] - t[m]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(1.0 / math.sqrt(mse))


def psnr_csv_value(value: Optional[float]) -> str:
    if value is None:
        return "undefined"
    if math.isinf(value):
        return "inf"
    return repr(float(value))


def write_metrics_csv(rows, path: Path | str, header=("iteration", "name", "value")) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], row[1], repr(float(row[2])) if isinstance(row[2], float) else row[2]])


def eval_masked_psnr(
    cloud: GaussianCloud,
    rig: CameraRig,
    dataset: MultiViewDataset,
    config: RunConfig,
    cam: int,
    frame: int = 0,
) -> Optional[float]:
    """Masked PSNR of the production render against the undistorted frame.

    Uses the evaluation camera's own subject mask and clamps the calibrated
    render to [0, 1] before comparing.
    """
    targets = dataset.targets(cam, frame, config.prep, masking=False)
    with torch.no_grad():
        out = render(cloud, dataset.cameras[cam], rig.color_scales[cam], rig.color_offsets[cam], config.render)
        color = torch.clamp(out.color, 0.0, 1.0)
    return masked_psnr(color, targets.image, targets.subject_mask)


@dataclass
class AblationRow:
    mask: bool
    lambda_seg: float
    sparse: bool
    n_init_points: int
    init_range: float
    val_psnr: Optional[float] = None
    train_psnr: Optional[float] = None


def _mean_psnr(values) -> Optional[float]:
    finite = [v for v in values if v is not None]
    if not finite:
        return None
    if any(math.isinf(v) for v in finite):
        return math.inf
    return float(np.mean(finite))


def run_ablation(
    dataset: MultiViewDataset,
    settings: list[AblationRow],
    base_config: RunConfig,
    val_cameras: Optional[list[int]] = None,
) -> list[AblationRow]:
    """Leave-one-out fits for each setting; fills in the PSNR columns."""
    from .optim import fit_initial_frame

    if dataset.n_cameras < 8:
        raise ValueError("ablation protocol expects a dataset with at least 8 cameras")
    if val_cameras is None:
        val_cameras = [dataset.val_camera]
    results = []
    for setting in settings:
        val_scores, train_scores = [], []
        for val_cam in val_cameras:
            cfg = replace(
                base_config,
                masking=setting.mask,
                sparsity_pruning=setting.sparse,
                n_init_points=setting.n_init_points,
                init_range=setting.init_range,
                val_camera=val_cam,
            )
            cfg.weights = replace(base_config.weights, seg=setting.lambda_seg)
            fit = fit_initial_frame(dataset, cfg)
            val_scores.append(eval_masked_psnr(fit.cloud, fit.rig, dataset, cfg, val_cam))
            train = [
                eval_masked_psnr(fit.cloud, fit.rig, dataset, cfg, cam)
                for cam in range(dataset.n_cameras)
                if cam != val_cam
            ]
            train_scores.append(_mean_psnr(train))
        results.append(replace(setting, val_psnr=_mean_psnr(val_scores), train_psnr=_mean_psnr(train_scores)))
    return results


def write_ablation_csv(rows: list[AblationRow], path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask", "lambda_seg", "sparse", "n_init_points", "init_range", "val_psnr", "train_psnr"])
        for row in rows:
            writer.writerow([
                row.mask, repr(float(row.lambda_seg)), row.sparse, row.n_init_points,
                repr(float(row.init_range)), psnr_csv_value(row.val_psnr), psnr_csv_value(row.train_psnr),
            ])


def plot_psnr_curves(frame_rows: list[tuple[int, str, float]], path: Path | str, title: str = "masked PSNR") -> None:
    """Line chart of PSNR vs frame; one line per metric name."""
    series: dict[str, list[tuple[int, float]]] = {}
    for frame, name, value in frame_rows:
        series.setdefault(name, []).append((frame, value))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in sorted(series.items()):
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name)
    ax.set_xlabel("frame")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

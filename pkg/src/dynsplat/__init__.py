"""Desk-scale dynamic 3D Gaussian splatting for sparse multi-camera rigs."""

from .config import (
    DeformConfig,
    DensifySchedule,
    LearningRates,
    LossWeights,
    NeighborConfig,
    PrepConfig,
    RenderConfig,
    RunConfig,
    load_config,
    save_config,
)
from .scene import (
    CameraModel,
    CameraRig,
    EmptyCloudError,
    GaussianCloud,
    SceneBounds,
    covariance,
    evaluate_gaussian,
    prune_outside_radius,
    quaternion_to_rotation,
)
from .render import (
    Projected2DGaussian,
    RenderedFrame,
    composite_ray,
    oracle_render,
    project_gaussian,
    render,
    render_gradients,
)
from .losses import (
    NeighborGraph,
    build_neighbor_graph,
    image_loss,
    iso_loss,
    rigid_loss,
    rot_loss,
    seg_loss,
    ssim,
    total_dyn_loss,
    total_init_loss,
)
from .optim import (
    AdamGroup,
    OptimState,
    adam_step,
    densify_and_prune,
    fit_initial_frame,
    sparsity_prune,
)
from .dynamics import (
    DeformationField,
    TrajectoryLog,
    apply_deformation,
    export_trajectories,
    positional_encoding,
    time_noise_std,
    track_iterative,
    train_deformation,
)
from .metrics import AblationRow, masked_psnr, run_ablation

__version__ = "0.1.0"

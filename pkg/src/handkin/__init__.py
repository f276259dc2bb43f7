"""Constraint-satisfying hand pose generation.

A numpy toolkit around a 26-DoF kinematic hand: differentiable forward
kinematics with sine-clamped joint limits, a Levenberg-Marquardt inverse
solver with data-driven limit extraction, a conditional denoising diffusion
model whose samples are projected onto the valid pose manifold, and a
temporal transformer for smoothing noisy per-frame estimates.
"""

import os as _os

if _os.environ.get("HANDKIN_DETERMINISTIC") == "1":
    # must land before numpy initializes its threading backend, hence here
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, "1")

from .config import (
    RunConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
)
from .data import (
    DatasetRecord,
    camera_from_config,
    gen_poses,
    gen_sequences,
    group_sequences,
    load_dataset,
    save_dataset,
    stack_records,
)
from .diffusion import (
    OracleDenoiser,
    Schedule,
    forward_noise,
    make_schedule,
    respace_schedule,
    sample,
)
from .errors import HandkinError, NumericalError, ValidationError
from .evaluation import (
    count_violations,
    evaluate,
    jitter_metric,
    moving_average,
    smooth_one,
    smooth_sequences,
)
from .geometry import (
    Alignment,
    Camera,
    normalize_positions,
    per_joint_errors,
    project,
    world_to_camera,
)
from .iksolver import FitResult, IkConfig, extract_limits, fit_pose, restarts
from .kinematics import (
    JointPositions,
    fk_jacobian,
    forward_kinematics,
    sine_denormalize,
    sine_normalize,
)
from .models import (
    DenoiserNet,
    IkHead,
    TemporalEncoder,
    bone_length_average,
    ik_project,
    synth_features,
    temporal_forward,
)
from .skeleton import (
    PoseParams,
    SkeletonGraph,
    canonical_hand_topology,
    load_skeleton,
    save_skeleton,
    skeleton_hash,
)
from .training import (
    TrainResult,
    load_pose_models,
    load_temporal_model,
    train_denoiser,
    train_temporal,
)

__version__ = "0.1.0"

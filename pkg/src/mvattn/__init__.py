"""Camera-aware multi-view generation machinery at desk scale.

Virtual SE(3) cameras and projective matrices, a reverse-mode autodiff
engine, projective position encoding, a toy diffusion transformer with
camera adapter branches, sparse correspondence supervision against an exact
synthetic reconstruction oracle, flow-matching training, and a cross-view
consistency metric — with a CLI tying them into reproducible experiments.
"""

__version__ = "0.1.0"

from .geometry import (
    CameraPose,
    Intrinsics,
    ProjectiveMatrix,
    ViewSpec,
    build_intrinsics,
    build_virtual_camera,
    default_view_grid,
    projective_matrix,
    relative_projective,
)
from .autodiff import Tensor, backward, grad_check
from .prope import PropeLayout, TokenViewMap, modulate_qkv, spatial_rope, unmodulate_output
from .model import Model, ModelConfig, frame_replication_map
from .correspondence import (
    CorrespondencePair,
    CorrespondenceSet,
    SyntheticScene,
    corr_acc,
    csl_loss,
    generate_scene,
    lambda_schedule,
    sample_negatives,
    synthetic_sfm,
)
from .training import TrainConfig, Trainer, flow_sample, run_ablation

__all__ = [
    "CameraPose",
    "Intrinsics",
    "ProjectiveMatrix",
    "ViewSpec",
    "build_intrinsics",
    "build_virtual_camera",
    "default_view_grid",
    "projective_matrix",
    "relative_projective",
    "Tensor",
    "backward",
    "grad_check",
    "PropeLayout",
    "TokenViewMap",
    "modulate_qkv",
    "spatial_rope",
    "unmodulate_output",
    "Model",
    "ModelConfig",
    "frame_replication_map",
    "CorrespondencePair",
    "CorrespondenceSet",
    "SyntheticScene",
    "corr_acc",
    "csl_loss",
    "generate_scene",
    "lambda_schedule",
    "sample_negatives",
    "synthetic_sfm",
    "TrainConfig",
    "Trainer",
    "flow_sample",
    "run_ablation",
]

"""Recurrent joint registration and segmentation of volumetric image pairs,
trained one-shot: a progressive diffeomorphic registration branch and a
prior-fused segmentation branch sharing a convolutional-LSTM backbone, plus
the synthetic-cohort generator and evaluation metrics used to verify them.
"""

from .metrics import CaseMetrics, MetricsReport, dsc, hd95, longitudinal_slope, surface_dsc
from .phantom import PhantomCase, PhantomSpec, generate_case, generate_cohort
from .rrn import (
    RegistrationNet,
    RegistrationTrajectory,
    RrnConfig,
    local_ncc,
    propagate_label,
    registration_loss,
    rrn_forward,
    smoothness_loss,
)
from .rsn import (
    RsnConfig,
    SegmentationNet,
    SegmentationTrajectory,
    deep_supervision_loss,
    ohem_loss,
    ohem_select,
    rsn_forward,
)
from .trainer import DatasetManifest, TrainConfig, replicate_exemplar, train, train_two_step
from .volume import (
    DeformationField,
    Grid,
    GridMismatchError,
    KeypointPair,
    LabelMap,
    Volume,
    compose,
    integrate_velocity,
    jacobian_determinant,
    jacobian_stats,
    sample_trilinear,
    tre,
    warp,
)

__version__ = "0.1.0"

__all__ = [
    "CaseMetrics", "MetricsReport", "dsc", "hd95", "longitudinal_slope", "surface_dsc",
    "PhantomCase", "PhantomSpec", "generate_case", "generate_cohort",
    "RegistrationNet", "RegistrationTrajectory", "RrnConfig", "local_ncc",
    "propagate_label", "registration_loss", "rrn_forward", "smoothness_loss",
    "RsnConfig", "SegmentationNet", "SegmentationTrajectory",
    "deep_supervision_loss", "ohem_loss", "ohem_select", "rsn_forward",
    "DatasetManifest", "TrainConfig", "replicate_exemplar", "train", "train_two_step",
    "DeformationField", "Grid", "GridMismatchError", "KeypointPair", "LabelMap",
    "Volume", "compose", "integrate_velocity", "jacobian_determinant",
    "jacobian_stats", "sample_trilinear", "tre", "warp",
]

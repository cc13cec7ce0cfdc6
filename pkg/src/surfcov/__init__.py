"""Per-point surface covariances learned from registered scan pairs."""

from .augment import AugmentSpec, ScanAugmenter, augment_scan
from .estimators import (
    DirectCovarianceEstimator,
    MLPCovarianceEstimator,
    PCACovariance,
    TrainConfig,
    TrainReport,
    build_correspondences,
    normal_from_covariance,
    pca_covariance,
    predict_direct,
    train,
)
from .geometry import CorrespondenceSet, GaussianComponent, PointCloud, cholesky_build
from .lie import PoseSE3, se3_exp, se3_log
from .likelihood import energy, gn_hessian, laplace_loss
from .matching import gicp_align, icp_point2plane, icp_point2point, odometry, rpe, success_rate
from .registration import register, solve_sdp

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "CorrespondenceSet",
    "DirectCovarianceEstimator",
    "GaussianComponent",
    "MLPCovarianceEstimator",
    "PCACovariance",
    "PointCloud",
    "PoseSE3",
    "ScanAugmenter",
    "TrainConfig",
    "TrainReport",
    "augment_scan",
    "build_correspondences",
    "cholesky_build",
    "energy",
    "gicp_align",
    "gn_hessian",
    "icp_point2plane",
    "icp_point2point",
    "laplace_loss",
    "normal_from_covariance",
    "odometry",
    "pca_covariance",
    "predict_direct",
    "register",
    "rpe",
    "se3_exp",
    "se3_log",
    "solve_sdp",
    "success_rate",
    "train",
]

"""LiDAR ego-motion by direct minimization of self-supervised registration losses."""

from .cloud import PointCloud, estimate_normals, prepare_sweep, voxel_downsample
from .correspond import CorrespondenceSet, associate, icp_weights, solve_confidences
from .evaluation import DriftResult, Trajectory, segment_errors
from .icp import DegenerateGeometryError, IcpConfig, icp_refine
from .losses import LossReport, LossWeights
from .se3 import Pose
from .solver import PairEstimate, SolverConfig, estimate_pair, run_sequence

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet",
    "DegenerateGeometryError",
    "DriftResult",
    "IcpConfig",
    "LossReport",
    "LossWeights",
    "PairEstimate",
    "PointCloud",
    "Pose",
    "SolverConfig",
    "Trajectory",
    "associate",
    "estimate_normals",
    "estimate_pair",
    "icp_refine",
    "icp_weights",
    "prepare_sweep",
    "run_sequence",
    "segment_errors",
    "solve_confidences",
    "voxel_downsample",
]

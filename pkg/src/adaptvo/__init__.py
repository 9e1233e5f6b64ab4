"""Online-adaptive monocular depth estimation and visual odometry.

A desk-scale, fully testable pipeline: a frozen depth predictor with
trainable low-rank refiners, pseudo-RGB-D pose solving, sparse-to-dense
pseudo-depth supervision gated by dynamic-object masks, and an EMA
stop-learning controller, exercised against synthetic scenes with exact
ground truth.
"""

__version__ = "0.1.0"

from .geometry import (CameraIntrinsics, DepthMap, MaskMap, Pose, SegMap,
                       Trajectory, backproject, project, warp_pixel)
from .refinernet import LowRankRefiner, ToyDepthNet

__all__ = [
    "CameraIntrinsics",
    "DepthMap",
    "MaskMap",
    "Pose",
    "SegMap",
    "Trajectory",
    "backproject",
    "project",
    "warp_pixel",
    "LowRankRefiner",
    "ToyDepthNet",
    "__version__",
]

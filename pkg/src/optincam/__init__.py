"""Opt-in camera toolkit: UWB tag tracking, tracklet matching, auto-calibration,
and a deterministic crowd simulator for end-to-end verification."""

from .geometry import (
    AnchorPose,
    CameraExtrinsics,
    CameraIntrinsics,
    HeadDetection,
    PolarMeasurement,
    anchor_polar_to_world,
    head_box_to_world,
    world_to_anchor_polar,
)
from .matching import AssignmentResult, CostMatrix, Tracklet, pairwise_cost, solve_assignment
from .nlos import NlosDetectorModel, TrainConfig, classify, train_detector
from .tracking import (
    InitPolicy,
    NoiseModel,
    TagTrajectory,
    UkfState,
    UwbSample,
    predict,
    process_noise,
    step,
    track_tag,
    uncertainty_flag,
    update,
)

__version__ = "0.1.0"

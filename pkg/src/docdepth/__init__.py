"""Dense, dynamic-object-aware depth maps from LiDAR sequences.

Stages: ground labelling, static/dynamic classification by free-space
voting, and composite z-buffer rendering into a calibrated camera.
"""
from .core import Label, PointCloud, Pose, RangeImage, Trajectory, interpolate_pose
from .io import CameraRig, DepthMap, SequenceManifest, read_manifest
from .calib import CalibrationView, Plane, calibrate
from .ground import GroundParams, segment_ground, segment_sequence
from .doc import KeyFrameParams, VotingParams, classify_frame, classify_sequence
from .render import RenderParams, render_at, render_depth
from .evaluation import (ClassificationReport, DepthReport, cross_lidar_validate, point_to_point,
                         score_classification, score_depth)
from .config import PipelineConfig, load_config
from .pipeline import Pipeline

__all__ = [
    "Label", "PointCloud", "Pose", "RangeImage", "Trajectory", "interpolate_pose",
    "CameraRig", "DepthMap", "SequenceManifest", "read_manifest",
    "CalibrationView", "Plane", "calibrate",
    "GroundParams", "segment_ground", "segment_sequence",
    "KeyFrameParams", "VotingParams", "classify_frame", "classify_sequence",
    "RenderParams", "render_at", "render_depth",
    "ClassificationReport", "DepthReport", "cross_lidar_validate", "point_to_point",
    "score_classification", "score_depth",
    "PipelineConfig", "load_config", "Pipeline",
]

__version__ = "0.1.0"

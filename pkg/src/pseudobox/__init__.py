"""Oriented 3D pseudo boxes from 2D image boxes and a single-view point cloud."""

from .geometry import Box3D, CameraCalibration, Rect2D, box3d_iou, bev_iou
from .losses import LossBreakdown, LossWeights
from .preprocessing import ObjectSample, PrepConfig, Scene, prepare_scene
from .fitter import FitConfig, FitResult, fit_object, fit_scene

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "CameraCalibration",
    "Rect2D",
    "box3d_iou",
    "bev_iou",
    "LossBreakdown",
    "LossWeights",
    "ObjectSample",
    "PrepConfig",
    "Scene",
    "prepare_scene",
    "FitConfig",
    "FitResult",
    "fit_object",
    "fit_scene",
]

"""Radar-camera BEV fusion detector with radar-aware depth lifting and unified feature fusion."""

from .boxes import Box3D, DetectionSet
from .config import ExperimentConfig
from .evaluation import EvalConfig, RoI, evaluate
from .ft import NoiseSpec, failure_test, inject_noise
from .geometry import BEVGridSpec, CameraModel, DepthBinSpec
from .model import ModelConfig, UniBEVFusion
from .pipeline import TrainConfig, Trainer, predict
from .radar import RadarPointCloud, RadarSchema
from .synth import Frame, SceneConfig, generate_frames

__version__ = "0.1.0"

__all__ = [
    "Box3D", "DetectionSet", "ExperimentConfig", "EvalConfig", "RoI", "evaluate", "NoiseSpec",
    "failure_test", "inject_noise", "BEVGridSpec", "CameraModel", "DepthBinSpec", "ModelConfig",
    "UniBEVFusion", "TrainConfig", "Trainer", "predict", "RadarPointCloud", "RadarSchema", "Frame",
    "SceneConfig", "generate_frames",
]

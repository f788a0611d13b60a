"""Point-set object detection with corner and foreground verification.

A small, fully deterministic detector built on numpy: point-set box
regression refined in two stages, verification heads trained on corner
heatmaps and per-class foreground maps, feature fusion of their outputs,
and corner-snapping joint inference at decode time.
"""

__version__ = "1.0.0"

from .geometry import BoxXYXY, BoxCWH, ConversionMode, giou_xyxy, iou_xyxy, points_to_box
from .model import ABLATION_PRESETS, HeadConfig, Model, apply_ablation, compute_losses
from .inference import Detection, InferenceConfig, RefineConfig, run_inference
from .evaluate import evaluate_detections
from .data import DatasetSpec, generate_dataset, load_split
from .train import TrainConfig, train_run
from .config import RunConfig, load_config, resolve_config

__all__ = [
    "__version__",
    "BoxXYXY",
    "BoxCWH",
    "ConversionMode",
    "points_to_box",
    "iou_xyxy",
    "giou_xyxy",
    "HeadConfig",
    "Model",
    "ABLATION_PRESETS",
    "apply_ablation",
    "compute_losses",
    "Detection",
    "InferenceConfig",
    "RefineConfig",
    "run_inference",
    "evaluate_detections",
    "DatasetSpec",
    "generate_dataset",
    "load_split",
    "TrainConfig",
    "train_run",
    "RunConfig",
    "load_config",
    "resolve_config",
]

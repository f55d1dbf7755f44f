"""Iterative detection with a history of previous detections.

A small dense detector takes an image plus a per-pixel count map of boxes
found so far and predicts the objects still missing. Running it repeatedly
and taking the union of its outputs recovers objects hidden in crowds.
"""

from .detector import DetectorConfig, DetectorParams, decode, forward, init_params
from .geometry import BBox, HistoryMap, ScoredBox, clip_box, iou, rasterize_history
from .iterative import (IterConfig, IterResult, infer_iterative, infer_one_per_iteration,
                        make_training_example, split_ground_truth)
from .kernels import BACKEND
from .metrics import EvalSample, MetricsReport, average_precision, evaluate, mmr, recall_at
from .nms import greedy_nms, soft_nms_linear
from .synthetic import SceneSample, SceneSpec, generate_dataset, generate_scene
from .train import TrainConfig

__all__ = [
    "BACKEND", "BBox", "DetectorConfig", "DetectorParams", "EvalSample", "HistoryMap",
    "IterConfig", "IterResult", "MetricsReport", "SceneSample", "SceneSpec", "ScoredBox",
    "TrainConfig", "average_precision", "clip_box", "decode", "evaluate", "forward",
    "generate_dataset", "generate_scene", "greedy_nms", "infer_iterative",
    "infer_one_per_iteration", "init_params", "iou", "make_training_example", "mmr",
    "rasterize_history", "recall_at", "soft_nms_linear", "split_ground_truth",
]

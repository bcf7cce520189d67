"""Toy anchor-based detector and detection post-processing."""
from .boxes import Box, box_iou, decode_boxes, encode_boxes, generate_anchors, iou, nms, paired_iou
from .metrics import Detections, GroundTruth, evaluate_map, interpolated_ap
from .model import (
    FP,
    Block,
    ConvSpec,
    DetectionOutput,
    FPContext,
    ToyDetector,
    ToyDetectorConfig,
    postprocess,
)

__all__ = [
    "Block",
    "Box",
    "ConvSpec",
    "DetectionOutput",
    "Detections",
    "FP",
    "FPContext",
    "GroundTruth",
    "ToyDetector",
    "ToyDetectorConfig",
    "box_iou",
    "decode_boxes",
    "encode_boxes",
    "evaluate_map",
    "generate_anchors",
    "interpolated_ap",
    "iou",
    "nms",
    "paired_iou",
    "postprocess",
]

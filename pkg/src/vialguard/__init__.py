"""Vial-positioning detection toolkit.

A densely connected single-shot detector for classifying vial placements as
success or failure, with its training loss, evaluation metrics, augmentation
pipeline, synthetic-scene data source, and a failure-triggered halt-and-alert
dispatcher.
"""

from .boxes import (
    AnchorConfig,
    AnchorSet,
    BoundingBox,
    Label,
    decode,
    encode,
    flip_horizontal,
    generate_default_boxes,
    iou,
    match,
    nms,
)
from .network import DenseSSDConfig, build_model, count_macs, count_parameters, tiny_config

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "AnchorSet",
    "BoundingBox",
    "DenseSSDConfig",
    "Label",
    "build_model",
    "count_macs",
    "count_parameters",
    "decode",
    "encode",
    "flip_horizontal",
    "generate_default_boxes",
    "iou",
    "match",
    "nms",
    "tiny_config",
    "__version__",
]

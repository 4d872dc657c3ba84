"""Post-processing and evaluation toolkit for Mask R-CNN style stenosis detectors."""

__version__ = "0.1.0"

from .geometry import BBox, Polygon, RleMask, box_iou, mask_iou, polygon_to_mask
from .postprocess import Detection, PostProcessConfig, run_pipeline

__all__ = [
    "BBox",
    "Polygon",
    "RleMask",
    "box_iou",
    "mask_iou",
    "polygon_to_mask",
    "Detection",
    "PostProcessConfig",
    "run_pipeline",
]

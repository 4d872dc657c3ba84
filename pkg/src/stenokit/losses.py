"""Multi-task RoI loss: classification, box and mask terms plus RoI labelling.

``total = lambda_cls * L_cls + lambda_box * L_box + lambda_mask * L_mask``

* ``L_cls``: cross-entropy ``-log p[true]``, averaged over every RoI.
* ``L_box``: sum of absolute differences of ``(x, y, w, h)``, averaged over
  positive RoIs.
* ``L_mask``: per-pixel binary cross-entropy, averaged over each mask's
  pixels and then over the ``N`` positive masks.

Only positive RoIs (IoU >= 0.5 with some ground-truth box) carry box and mask
terms; both are 0 when a batch has no positive RoI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyBatch, InvalidRoi, ShapeMismatch
from .geometry import BBox, RleMask, box_iou

PROB_FLOOR = 1e-12
POSITIVE_IOU = 0.5


@dataclass(frozen=True)
class LossGains:
    lambda_cls: float = 1.0
    lambda_box: float = 1.0
    lambda_mask: float = 1.0

    def __post_init__(self) -> None:
        if min(self.lambda_cls, self.lambda_box, self.lambda_mask) < 0:
            raise ValueError("loss gains must be non-negative")


@dataclass(frozen=True, eq=False)
class RoiSample:
    """One sampled RoI with its predictions and targets.

    Boxes are ``(x, y, w, h)`` quadruples. Mask grids are 2-D arrays of the
    same shape; they are ignored for negative RoIs.
    """

    class_probs: np.ndarray
    true_class: int
    pred_box: tuple[float, float, float, float]
    true_box: tuple[float, float, float, float]
    pred_mask: np.ndarray
    target_mask: np.ndarray
    is_positive: bool

    def __post_init__(self) -> None:
        probs = np.asarray(self.class_probs, dtype=np.float64)
        if probs.ndim != 1 or np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("class_probs must be a vector of probabilities")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError(f"class_probs sum to {probs.sum()}, expected 1")
        pred = np.asarray(self.pred_mask, dtype=np.float64)
        target = np.asarray(self.target_mask, dtype=np.float64)
        if pred.shape != target.shape:
            raise ShapeMismatch(f"mask grids differ: {pred.shape} vs {target.shape}")
        if np.any(pred < 0) or np.any(pred > 1):
            raise ValueError("pred_mask entries must lie in [0, 1]")
        if not np.all((target == 0) | (target == 1)):
            raise ValueError("target_mask must be binary")
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "pred_mask", pred)
        object.__setattr__(self, "target_mask", target)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls: float
    box: float
    mask: float

    def __iter__(self):
        return iter((self.total, self.cls, self.box, self.mask))


def cls_loss(probs: Sequence[float], true_class: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_class < probs.size:
        raise IndexError(f"true_class {true_class} out of range for {probs.size} classes")
    return -math.log(max(float(probs[true_class]), PROB_FLOOR))


def box_loss(pred: Sequence[float], target: Sequence[float]) -> float:
    if len(pred) != 4 or len(target) != 4:
        raise ValueError("boxes must be (x, y, w, h) quadruples")
    return math.fsum(abs(float(p) - float(t)) for p, t in zip(pred, target))


def _bce_mean(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.clip(pred, PROB_FLOOR, 1.0 - PROB_FLOOR)
    terms = target * np.log(p) + (1.0 - target) * np.log1p(-p)
    return -math.fsum(terms.ravel()) / terms.size


def mask_loss(pred_masks: Sequence[np.ndarray], target_masks: Sequence[np.ndarray]) -> float:
    if len(pred_masks) != len(target_masks):
        raise ShapeMismatch(
            f"{len(pred_masks)} predicted masks vs {len(target_masks)} targets"
        )
    if not pred_masks:
        raise EmptyBatch("mask loss is undefined without positive RoIs")
    per_mask = []
    for pred, target in zip(pred_masks, target_masks):
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ShapeMismatch(f"mask grids differ: {pred.shape} vs {target.shape}")
        per_mask.append(_bce_mean(pred, target))
    return math.fsum(per_mask) / len(per_mask)


def total_loss(samples: Sequence[RoiSample], gains: LossGains = LossGains()) -> LossBreakdown:
    if not samples:
        raise EmptyBatch("total_loss needs at least one RoI")
    l_cls = math.fsum(cls_loss(s.class_probs, s.true_class) for s in samples) / len(samples)
    positives = [s for s in samples if s.is_positive]
    if positives:
        l_box = math.fsum(box_loss(s.pred_box, s.true_box) for s in positives) / len(positives)
        l_mask = mask_loss([s.pred_mask for s in positives], [s.target_mask for s in positives])
    else:
        l_box = l_mask = 0.0
    total = gains.lambda_cls * l_cls + gains.lambda_box * l_box + gains.lambda_mask * l_mask
    return LossBreakdown(total, l_cls, l_box, l_mask)


def assign_positive(
    roi: BBox, gt_boxes: Sequence[BBox], threshold: float = POSITIVE_IOU
) -> tuple[bool, int | None]:
    """Label a RoI against ground truth; IoU exactly at ``threshold`` counts as positive."""
    best_iou = -1.0
    best = None
    for i, gt in enumerate(gt_boxes):
        iou = box_iou(roi, gt)
        if iou > best_iou:
            best_iou, best = iou, i
    if best is None or best_iou < threshold:
        return False, None
    return True, best


def mask_target(roi: BBox, gt_mask: RleMask, out_h: int = 28, out_w: int = 28) -> np.ndarray:
    """Crop ``gt_mask`` to ``roi`` and resample to ``out_h x out_w``.

    Each output cell takes the ground-truth pixel containing the cell's center
    (nearest neighbour); centers off the canvas read as background.
    """
    if roi.x2 <= roi.x1 or roi.y2 <= roi.y1:
        raise InvalidRoi(f"degenerate RoI: {roi}")
    bitmap = gt_mask.to_bitmap()
    ys = roi.y1 + (np.arange(out_h) + 0.5) * ((roi.y2 - roi.y1) / out_h)
    xs = roi.x1 + (np.arange(out_w) + 0.5) * ((roi.x2 - roi.x1) / out_w)
    rows = np.floor(ys).astype(np.int64)
    cols = np.floor(xs).astype(np.int64)
    row_ok = (rows >= 0) & (rows < gt_mask.height)
    col_ok = (cols >= 0) & (cols < gt_mask.width)
    out = np.zeros((out_h, out_w), dtype=np.uint8)
    sub = bitmap[np.ix_(rows[row_ok], cols[col_ok])]
    out[np.ix_(row_ok, col_ok)] = sub
    return out

"""Inference post-processing: confidence filter, greedy NMS, top-k cap.

Defaults are the tuned inference settings: NMS IoU 0.95, score >= 0.8, at
most 3 detections per image (RPN NMS IoU 0.7 is kept for reference).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import MissingMask
from .geometry import BBox, RleMask, mask_iou, pairwise_box_iou

IouKind = Literal["box", "mask"]


@dataclass(frozen=True)
class Detection:
    """A scored, classed prediction for one image (mask optional)."""

    image_id: int
    class_id: int
    score: float
    box: BBox
    mask: RleMask | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def sort_key(self) -> tuple:
        """Total order used wherever inputs are canonicalized."""
        runs = self.mask.runs if self.mask is not None else ()
        return (-self.score, self.image_id, self.class_id, self.box.as_tuple(), runs)


@dataclass(frozen=True)
class PostProcessConfig:
    nms_iou: float = 0.95
    score_threshold: float = 0.8
    max_detections: int = 3
    rpn_nms_iou: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError(f"nms_iou must be in (0, 1], got {self.nms_iou}")
        if not 0.0 < self.rpn_nms_iou <= 1.0:
            raise ValueError(f"rpn_nms_iou must be in (0, 1], got {self.rpn_nms_iou}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if self.max_detections < 0:
            raise ValueError("max_detections must be >= 0")


def _iou_matrix(dets: Sequence[Detection], iou_kind: IouKind) -> np.ndarray:
    if iou_kind == "box":
        boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
        return pairwise_box_iou(boxes, boxes)
    if iou_kind == "mask":
        if any(d.mask is None for d in dets):
            raise MissingMask("mask-IoU NMS needs a mask on every detection")
        n = len(dets)
        out = np.eye(n)
        for i in range(n):
            for j in range(i + 1, n):
                out[i, j] = out[j, i] = mask_iou(dets[i].mask, dets[j].mask)
        return out
    raise ValueError(f"unknown iou_kind {iou_kind!r}")


def nms(
    dets: Sequence[Detection], iou_threshold: float = 0.95, iou_kind: IouKind = "box"
) -> list[Detection]:
    """Class-aware greedy NMS.

    Candidates are visited by descending score (ties: input order). A
    candidate is dropped when its IoU with an already kept detection of the
    same class is strictly greater than ``iou_threshold``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ordered = [dets[i] for i in order]
    if not ordered:
        return []
    iou = _iou_matrix(ordered, iou_kind)
    classes = np.array([d.class_id for d in ordered])
    images = np.array([d.image_id for d in ordered])
    same_group = (classes[:, None] == classes[None, :]) & (images[:, None] == images[None, :])
    conflict = same_group & (iou > iou_threshold)

    alive = np.ones(len(ordered), dtype=bool)
    keep = []
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        keep.append(ordered[i])
        alive[i + 1:] &= ~conflict[i, i + 1:]
    return keep


def confidence_filter(dets: Iterable[Detection], threshold: float = 0.8) -> list[Detection]:
    return [d for d in dets if d.score >= threshold]


def top_k(dets: Sequence[Detection], k: int = 3) -> list[Detection]:
    if k < 0:
        raise ValueError("k must be >= 0")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order[:k]]


def group_by_image(dets: Iterable[Detection]) -> dict[int, list[Detection]]:
    groups: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        groups[d.image_id].append(d)
    return {k: groups[k] for k in sorted(groups)}


def run_image(
    dets: Sequence[Detection], cfg: PostProcessConfig, iou_kind: IouKind = "box"
) -> tuple[list[Detection], tuple[int, int, int, int]]:
    """Pipeline for one image; also returns survivor counts per stage
    ``(input, after filter, after NMS, after cap)``."""
    ordered = sorted(dets, key=Detection.sort_key)
    kept = confidence_filter(ordered, cfg.score_threshold)
    n_filter = len(kept)
    kept = nms(kept, cfg.nms_iou, iou_kind)
    n_nms = len(kept)
    kept = top_k(kept, cfg.max_detections)
    return kept, (len(ordered), n_filter, n_nms, len(kept))


def run_pipeline(
    dets: Iterable[Detection],
    cfg: PostProcessConfig = PostProcessConfig(),
    iou_kind: IouKind = "box",
) -> list[Detection]:
    """confidence filter -> NMS -> top-k, applied per image.

    Inputs are canonically sorted first, so the result does not depend on
    input order. Output is grouped by ascending image id, each group in
    descending score order.
    """
    out: list[Detection] = []
    for group in group_by_image(dets).values():
        out.extend(run_image(group, cfg, iou_kind)[0])
    return out

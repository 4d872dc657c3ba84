"""Seeded synthetic scenes with controllably corrupted detections.

Each image is cut into a grid of cells and every object lives in its own
cell, so corruptions only interact with the object they were derived from.
Detection roles:

``true``       jittered copy of a ground-truth blob
``duplicate``  a lower-scored copy of a true detection, shifted so its box
               IoU with the parent falls in ``duplicate_iou``
``twin``       detections of a "twin" pair: two ground-truth triangles whose
               boxes overlap at IoU ~0.8-0.9 but whose masks barely touch
``spurious``   high-score detection in an empty cell
``low_score``  spurious detection scored below the confidence threshold

The generator records these roles and derives the expected post-pipeline
TP/FP/FN counts from them (the answer key) without calling the matcher.
All coordinates are multiples of 1/16 px so xywh <-> corner conversions are
exact.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .dataset_io import (
    Annotation,
    Category,
    DetectionFile,
    DetectionRecord,
    GroundTruthSet,
    ImageInfo,
)
from .geometry import Polygon, box_iou, mask_iou, polygon_to_mask
from .postprocess import Detection, PostProcessConfig

QUANTUM = 1 / 16
CELL_TARGET = 128
CENTER_BAND = (0.42, 0.58)
HALF_SIZE_BAND = (0.16, 0.25)
MAX_JITTER_FRACTION = 0.04


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_images: int = 8
    image_size: int = 512
    instances_per_image: tuple[int, int] = (1, 3)
    num_classes: int = 1
    jitter: float = 0.0
    score_range: tuple[float, float] = (1.0, 1.0)
    duplicate_rate: float = 0.0
    duplicate_iou: tuple[float, float] = (0.6, 0.9)
    dropout_rate: float = 0.0
    false_positive_rate: float = 0.0
    low_score_rate: float = 0.0
    low_score_range: tuple[float, float] = (0.3, 0.75)
    twin_rate: float = 0.0

    def __post_init__(self) -> None:
        for name in ("duplicate_rate", "dropout_rate", "false_positive_rate",
                     "low_score_rate", "twin_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        lo, hi = self.instances_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"bad instances_per_image range {self.instances_per_image}")
        # one cell per instance (twins share a cell) plus the spurious extras
        needed = hi + (self.false_positive_rate > 0) + (self.low_score_rate > 0)
        if needed > self.cells_per_side ** 2:
            raise ValueError(
                f"{needed} objects do not fit the {self.cells_per_side ** 2} cells "
                f"of a {self.image_size}px image"
            )
        if self.jitter < 0 or self.jitter > MAX_JITTER_FRACTION * self.cell_size:
            raise ValueError(
                f"jitter must be in [0, {MAX_JITTER_FRACTION * self.cell_size:g}] px"
            )
        for name in ("score_range", "low_score_range"):
            a, b = getattr(self, name)
            if not 0.0 <= a <= b <= 1.0:
                raise ValueError(f"bad {name} {(a, b)}")
        if not 0.0 < self.duplicate_iou[0] <= self.duplicate_iou[1] < 1.0:
            raise ValueError(f"bad duplicate_iou {self.duplicate_iou}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def cells_per_side(self) -> int:
        return max(1, self.image_size // CELL_TARGET)

    @property
    def cell_size(self) -> float:
        return self.image_size / self.cells_per_side

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PlantedCounts:
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class SynthResult:
    ground_truth: GroundTruthSet
    detections: DetectionFile
    roles: tuple[str, ...]
    planted: PlantedCounts
    per_image: dict[int, PlantedCounts] = field(default_factory=dict)
    pipeline: PostProcessConfig = PostProcessConfig()
    match_iou: float = 0.5

    def __iter__(self):
        return iter((self.ground_truth, self.detections))

    def manifest(self, cfg: SynthConfig) -> dict[str, Any]:
        return {
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "pipeline": asdict(self.pipeline),
            "match_iou": self.match_iou,
            "planted": asdict(self.planted),
            "num_images": len(self.ground_truth.images),
            "num_annotations": len(self.ground_truth.annotations),
            "num_detections": len(self.detections),
            "roles": {r: self.roles.count(r) for r in sorted(set(self.roles))},
        }


def _q(v: float) -> float:
    return round(v / QUANTUM) * QUANTUM


def _quantize(points: np.ndarray) -> Polygon:
    return Polygon(tuple((_q(x), _q(y)) for x, y in points))


def _blob(rng: np.random.Generator, cx: float, cy: float, half: float) -> np.ndarray:
    """Convex polygon: points at sorted random angles on an ellipse."""
    n = int(rng.integers(6, 11))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    rx = half * rng.uniform(0.75, 1.0)
    ry = half * rng.uniform(0.75, 1.0)
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


def _shift(points: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return points + np.array([dx, dy])


@dataclass
class _Planted:
    """One detection under construction plus what the key needs to know."""

    poly: Polygon
    score: float
    class_id: int
    role: str
    gt_index: int | None = None
    partner: int | None = None  # index of the detection this one may be suppressed by


class _ImageBuilder:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator, image_id: int, match_iou: float):
        self.cfg = cfg
        self.match_iou = match_iou
        self.rng = rng
        self.image_id = image_id
        n = cfg.cells_per_side
        self.free_cells = [int(c) for c in rng.permutation(n * n)]
        self.gt_polys: list[tuple[Polygon, int]] = []
        self.dets: list[_Planted] = []

    def _cell_center(self) -> tuple[float, float, float]:
        cell = self.free_cells.pop()
        n = self.cfg.cells_per_side
        size = self.cfg.cell_size
        ox, oy = (cell % n) * size, (cell // n) * size
        cx = ox + size * self.rng.uniform(*CENTER_BAND)
        cy = oy + size * self.rng.uniform(*CENTER_BAND)
        half = size * self.rng.uniform(*HALF_SIZE_BAND)
        return cx, cy, half

    def _jitter(self, pts: np.ndarray) -> np.ndarray:
        j = self.cfg.jitter
        if j == 0:
            return pts
        return _shift(pts, *self.rng.uniform(-j, j, 2))

    def _true_score(self) -> float:
        lo, hi = self.cfg.score_range
        return float(self.rng.uniform(lo, hi)) if hi > lo else lo

    def _detect(self, gt_pts: np.ndarray, gt_index: int, class_id: int, role: str) -> int | None:
        if self.rng.random() < self.cfg.dropout_rate:
            return None
        gt_poly = self.gt_polys[gt_index][0]
        size = self.cfg.image_size
        gt_mask = polygon_to_mask(gt_poly, size, size)
        # re-draw jitter until the detection clears the matching threshold
        for _ in range(20):
            poly = _quantize(self._jitter(gt_pts))
            if mask_iou(polygon_to_mask(poly, size, size), gt_mask) >= self.match_iou:
                break
        else:
            poly = gt_poly
        self.dets.append(_Planted(poly, self._true_score(), class_id, role, gt_index))
        return len(self.dets) - 1

    def add_single(self, class_id: int) -> None:
        cx, cy, half = self._cell_center()
        pts = _blob(self.rng, cx, cy, half)
        self.gt_polys.append((_quantize(pts), class_id))
        parent = self._detect(pts, len(self.gt_polys) - 1, class_id, "true")
        if parent is None or self.rng.random() >= self.cfg.duplicate_rate:
            return
        pd = self.dets[parent]
        box = pd.poly.bbox()
        u = self.rng.uniform(*self.cfg.duplicate_iou)
        axis = int(self.rng.integers(2))
        extent = box.width if axis == 0 else box.height
        step = extent * (1 - u) / (1 + u)
        step *= 1 if self.rng.random() < 0.5 else -1
        offset = (step, 0.0) if axis == 0 else (0.0, step)
        dup_pts = _shift(np.asarray(pd.poly.vertices), *offset)
        dup_score = max(0.0, pd.score - float(self.rng.uniform(0.005, 0.05)))
        self.dets.append(
            _Planted(_quantize(dup_pts), dup_score, class_id, "duplicate", pd.gt_index, partner=parent)
        )

    def add_twins(self, class_id: int) -> None:
        cx, cy, half = self._cell_center()
        d = 2 * half * self.rng.uniform(0.02, 0.05)
        x0, y0, x1, y1 = cx - half, cy - half, cx + half, cy + half
        upper = np.array([[x0, y0], [x1, y0], [x0, y1]])
        lower = np.array([[x1 + d, y0 + d], [x1 + d, y1 + d], [x0 + d, y1 + d]])
        first = len(self.gt_polys)
        self.gt_polys.append((_quantize(upper), class_id))
        self.gt_polys.append((_quantize(lower), class_id))
        a = self._detect(upper, first, class_id, "twin")
        b = self._detect(lower, first + 1, class_id, "twin")
        if a is not None and b is not None:
            # the lower-scored twin is the one NMS could remove
            hi, lo = (a, b) if self.dets[a].score >= self.dets[b].score else (b, a)
            self.dets[lo].partner = hi

    def add_spurious(self, class_id: int, role: str) -> None:
        cx, cy, half = self._cell_center()
        poly = _quantize(_blob(self.rng, cx, cy, half))
        if role == "low_score":
            score = float(self.rng.uniform(*self.cfg.low_score_range))
        else:
            score = self._true_score()
        self.dets.append(_Planted(poly, score, class_id, role))


def _to_detection(p: _Planted, image_id: int, size: int) -> Detection:
    return Detection(image_id, p.class_id, p.score, p.poly.bbox(), polygon_to_mask(p.poly, size, size))


def _expected_counts(
    planted: list[_Planted], dets: list[Detection], n_gt: int,
    pipeline: PostProcessConfig,
) -> PlantedCounts:
    """Answer key for one image, from roles and construction geometry."""
    alive = [p.score >= pipeline.score_threshold for p in planted]
    for i, p in enumerate(planted):
        if alive[i] and p.partner is not None and alive[p.partner]:
            if box_iou(dets[i].box, dets[p.partner].box) > pipeline.nms_iou:
                alive[i] = False
    survivors = sorted((i for i in range(len(planted)) if alive[i]), key=lambda i: dets[i].sort_key())
    survivors = survivors[: pipeline.max_detections]
    tp = sum(1 for i in survivors if planted[i].role in ("true", "twin"))
    fp = len(survivors) - tp
    return PlantedCounts(tp, fp, n_gt - tp)


def generate(
    cfg: SynthConfig,
    pipeline: PostProcessConfig = PostProcessConfig(),
    match_iou: float = 0.5,
) -> SynthResult:
    """Build a scene set and its planted answer key.

    With the default (zero-noise) config, every ground-truth object has one
    detection with score 1.0 and the same polygon.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    images, annotations, records, roles = [], [], [], []
    per_image: dict[int, PlantedCounts] = {}
    ann_id = 1
    for image_id in range(1, cfg.num_images + 1):
        b = _ImageBuilder(cfg, rng, image_id, match_iou)
        lo, hi = cfg.instances_per_image
        for _ in range(int(rng.integers(lo, hi + 1))):
            class_id = int(rng.integers(1, cfg.num_classes + 1))
            if rng.random() < cfg.twin_rate:
                b.add_twins(class_id)
            else:
                b.add_single(class_id)
        if rng.random() < cfg.false_positive_rate:
            b.add_spurious(int(rng.integers(1, cfg.num_classes + 1)), "spurious")
        if rng.random() < cfg.low_score_rate:
            b.add_spurious(int(rng.integers(1, cfg.num_classes + 1)), "low_score")

        images.append(ImageInfo(image_id, size, size, f"synth_{image_id:05d}.png"))
        for poly, class_id in b.gt_polys:
            box = poly.bbox()
            annotations.append(
                Annotation(ann_id, image_id, class_id, (tuple(poly.to_flat()),),
                           box.to_xywh(), poly.area(), extra={"iscrowd": 0})
            )
            ann_id += 1
        dets = [_to_detection(p, image_id, size) for p in b.dets]
        per_image[image_id] = _expected_counts(b.dets, dets, len(b.gt_polys), pipeline)
        order = sorted(range(len(dets)), key=lambda i: dets[i].sort_key())
        records.extend(DetectionRecord.from_detection(dets[i]) for i in order)
        roles.extend(b.dets[i].role for i in order)

    categories = tuple(
        Category(c, "stenosis" if cfg.num_classes == 1 else f"class_{c}")
        for c in range(1, cfg.num_classes + 1)
    )
    gt = GroundTruthSet(tuple(images), tuple(annotations), categories)
    total = PlantedCounts(
        sum(c.tp for c in per_image.values()),
        sum(c.fp for c in per_image.values()),
        sum(c.fn for c in per_image.values()),
    )
    return SynthResult(gt, DetectionFile(tuple(records)), tuple(roles), total,
                       per_image, pipeline, match_iou)

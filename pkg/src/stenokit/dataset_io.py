"""COCO-format ground truth, the detections file format, and dataset splits.

Ground truth is ordinary COCO instance JSON (``images`` / ``annotations`` /
``categories``), which is the form ARCADE ships in. Unknown keys are kept in
``extra`` and written back unchanged.

Detections are written as::

    {"$schema": "stenokit/detections/v1",
     "detections": [{"image_id": 1, "category_id": 1, "score": 0.93,
                     "bbox": [x, y, w, h],
                     "segmentation": {"size": [h, w], "counts": [...]}}]}

A bare JSON array of such records (COCO results format) is accepted on read.
``segmentation`` may be omitted, an RLE dict (``counts`` as a list or COCO's
compressed string), or a list of flat polygons.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import ParseError, SizeMismatch, ValidationError
from .geometry import BBox, Polygon, RleMask, polygons_to_mask, rle_from_counts, rle_from_string
from .postprocess import Detection

DETECTIONS_SCHEMA = "stenokit/detections/v1"

# raw COCO polygons, one flat [x0, y0, x1, y1, ...] tuple per part
PolygonParts = tuple[tuple[float, ...], ...]
Segmentation = Union[PolygonParts, RleMask]


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str = ""
    extra: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    extra: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    segmentation: Segmentation
    bbox: tuple[float, float, float, float]
    area: float
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def box(self) -> BBox:
        return BBox.from_xywh(*self.bbox)

    def polygons(self) -> list[Polygon]:
        if isinstance(self.segmentation, RleMask):
            return []
        return [Polygon.from_flat(part) for part in self.segmentation]

    def to_mask(self, height: int, width: int) -> RleMask:
        if isinstance(self.segmentation, RleMask):
            return self.segmentation
        return polygons_to_mask(self.polygons(), height, width)


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    images: tuple[ImageInfo, ...]
    annotations: tuple[Annotation, ...]
    categories: tuple[Category, ...]
    extra: dict = field(default_factory=dict)
    _masks: dict = field(default_factory=dict, init=False, repr=False)
    _by_id: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id.update((im.id, im) for im in self.images)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GroundTruthSet):
            return NotImplemented
        return (
            self.images == other.images
            and self.annotations == other.annotations
            and self.categories == other.categories
        )

    def image(self, image_id: int) -> ImageInfo:
        return self._by_id[image_id]

    def image_sizes(self) -> dict[int, tuple[int, int]]:
        """``image_id -> (height, width)``."""
        return {im.id: (im.height, im.width) for im in self.images}

    def mask(self, ann: Annotation) -> RleMask:
        """Rasterized annotation mask, computed on first use and cached."""
        cached = self._masks.get(ann.id)
        if cached is None:
            im = self.image(ann.image_id)
            cached = self._masks[ann.id] = ann.to_mask(im.height, im.width)
        return cached

    def instances(self, with_masks: bool = True) -> list[Detection]:
        """Ground-truth annotations as score-1 :class:`Detection` objects."""
        return [
            Detection(
                image_id=a.image_id,
                class_id=a.category_id,
                score=1.0,
                box=a.box,
                mask=self.mask(a) if with_masks else None,
            )
            for a in self.annotations
        ]


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    category_id: int
    score: float
    bbox: tuple[float, float, float, float]
    segmentation: Segmentation | None = None
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    def to_detection(self, image_sizes: Mapping[int, tuple[int, int]] | None = None) -> Detection:
        mask = self.segmentation
        if mask is not None and not isinstance(mask, RleMask):
            if image_sizes is None or self.image_id not in image_sizes:
                raise ValidationError(
                    [f"polygon segmentation on image {self.image_id} needs the image size"]
                )
            h, w = image_sizes[self.image_id]
            mask = polygons_to_mask([Polygon.from_flat(p) for p in mask], h, w)
        return Detection(self.image_id, self.category_id, self.score, BBox.from_xywh(*self.bbox), mask)

    @classmethod
    def from_detection(cls, det: Detection) -> DetectionRecord:
        return cls(det.image_id, det.class_id, det.score, det.box.to_xywh(), det.mask)


@dataclass(frozen=True)
class DetectionFile:
    records: tuple[DetectionRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def to_detections(
        self, image_sizes: Mapping[int, tuple[int, int]] | None = None
    ) -> list[Detection]:
        return [r.to_detection(image_sizes) for r in self.records]

    @classmethod
    def from_detections(cls, dets: Iterable[Detection]) -> DetectionFile:
        return cls(tuple(DetectionRecord.from_detection(d) for d in dets))


# --------------------------------------------------------------------------
# parsing helpers

def _read_json(path: str | os.PathLike) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in {path}: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from exc


def _require(obj: Any, key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", where)
    if key not in obj:
        raise ParseError(f"missing field '{key}'", where)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ParseError(f"field '{key}' has the wrong type ({type(value).__name__})", where)
    return value


def _number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _parse_segmentation(raw: Any, where: str) -> Segmentation:
    if isinstance(raw, dict):
        size = _require(raw, "size", list, where)
        if len(size) != 2 or not all(isinstance(s, int) and s > 0 for s in size):
            raise ParseError("RLE 'size' must be [height, width]", where)
        counts = raw.get("counts")
        h, w = size
        try:
            if isinstance(counts, str):
                return rle_from_string(counts, h, w)
            if isinstance(counts, list) and all(isinstance(c, int) for c in counts):
                return rle_from_counts(h, w, counts)
        except ValueError as exc:
            raise ParseError(f"bad RLE: {exc}", where) from exc
        raise ParseError("RLE 'counts' must be a list of ints or a string", where)
    if isinstance(raw, list):
        parts = []
        for k, part in enumerate(raw):
            if not isinstance(part, list) or not all(_number(v) for v in part):
                raise ParseError("polygon must be a flat list of numbers", f"{where}[{k}]")
            parts.append(tuple(part))
        return tuple(parts)
    raise ParseError("segmentation must be a polygon list or an RLE object", where)


def _bbox(raw: Any, where: str) -> tuple[float, float, float, float]:
    if not isinstance(raw, list) or len(raw) != 4 or not all(_number(v) for v in raw):
        raise ParseError("bbox must be four finite numbers [x, y, w, h]", where)
    return tuple(raw)  # type: ignore[return-value]


def _extra(obj: dict, known: Iterable[str]) -> dict:
    known = set(known)
    return {k: v for k, v in obj.items() if k not in known}


def _segmentation_json(seg: Segmentation) -> Any:
    if isinstance(seg, RleMask):
        return {"size": [seg.height, seg.width], "counts": list(seg.runs)}
    return [list(p) for p in seg]


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# ground truth

_IMAGE_KEYS = ("id", "width", "height", "file_name")
_CATEGORY_KEYS = ("id", "name")
_ANNOTATION_KEYS = ("id", "image_id", "category_id", "segmentation", "bbox", "area")


def parse_ground_truth(data: Any) -> GroundTruthSet:
    if not isinstance(data, dict):
        raise ParseError("ground truth must be a JSON object", "top level")
    images = []
    for i, raw in enumerate(_require(data, "images", list, "top level")):
        where = f"images[{i}]"
        images.append(
            ImageInfo(
                id=_require(raw, "id", int, where),
                width=_require(raw, "width", int, where),
                height=_require(raw, "height", int, where),
                file_name=_require(raw, "file_name", str, where) if "file_name" in raw else "",
                extra=_extra(raw, _IMAGE_KEYS),
            )
        )
    categories = []
    for i, raw in enumerate(_require(data, "categories", list, "top level")):
        where = f"categories[{i}]"
        categories.append(
            Category(
                id=_require(raw, "id", int, where),
                name=_require(raw, "name", str, where),
                extra=_extra(raw, _CATEGORY_KEYS),
            )
        )
    annotations = []
    for i, raw in enumerate(_require(data, "annotations", list, "top level")):
        where = f"annotations[{i}]"
        annotations.append(
            Annotation(
                id=_require(raw, "id", int, where),
                image_id=_require(raw, "image_id", int, where),
                category_id=_require(raw, "category_id", int, where),
                segmentation=_parse_segmentation(
                    _require(raw, "segmentation", (list, dict), where), f"{where}.segmentation"
                ),
                bbox=_bbox(_require(raw, "bbox", list, where), f"{where}.bbox"),
                area=_require(raw, "area", (int, float), where),
                extra=_extra(raw, _ANNOTATION_KEYS),
            )
        )
    gt = GroundTruthSet(
        tuple(images),
        tuple(annotations),
        tuple(categories),
        extra=_extra(data, ("images", "annotations", "categories")),
    )
    validate_ground_truth(gt)
    return gt


def validate_ground_truth(gt: GroundTruthSet) -> None:
    """Raise :class:`ValidationError` listing every violated invariant."""
    errors: list[str] = []

    def dup_check(kind: str, ids: Sequence[int]) -> None:
        seen: set[int] = set()
        for x in ids:
            if x in seen:
                errors.append(f"duplicate {kind} id {x}")
            seen.add(x)

    dup_check("image", [im.id for im in gt.images])
    dup_check("category", [c.id for c in gt.categories])
    dup_check("annotation", [a.id for a in gt.annotations])
    for im in gt.images:
        if im.width <= 0 or im.height <= 0:
            errors.append(f"image {im.id}: non-positive size {im.width}x{im.height}")

    images = {im.id: im for im in gt.images}
    cats = {c.id for c in gt.categories}
    for a in gt.annotations:
        tag = f"annotation {a.id}"
        im = images.get(a.image_id)
        if im is None:
            errors.append(f"{tag}: references missing image {a.image_id}")
        if a.category_id not in cats:
            errors.append(f"{tag}: references missing category {a.category_id}")
        if not _number(a.area) or a.area <= 0:
            errors.append(f"{tag}: area must be > 0, got {a.area}")
        x, y, w, h = a.bbox
        if w < 0 or h < 0:
            errors.append(f"{tag}: bbox has negative extent {a.bbox}")
        elif im is not None:
            cw = min(x + w, im.width) - max(x, 0)
            ch = min(y + h, im.height) - max(y, 0)
            if cw < 0 or ch < 0:
                errors.append(f"{tag}: bbox {a.bbox} lies outside image {im.id}")
        if isinstance(a.segmentation, RleMask):
            if im is not None and a.segmentation.shape != (im.height, im.width):
                errors.append(f"{tag}: RLE size {a.segmentation.shape} != image size")
        else:
            if not a.segmentation:
                errors.append(f"{tag}: empty segmentation")
            for k, part in enumerate(a.segmentation):
                if len(part) < 6 or len(part) % 2:
                    errors.append(f"{tag}: polygon {k} needs >= 3 (x, y) pairs")
    if errors:
        raise ValidationError(errors)


def ground_truth_to_json(gt: GroundTruthSet) -> dict:
    out = dict(gt.extra)
    out["images"] = [
        {**im.extra, "id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
        for im in gt.images
    ]
    out["categories"] = [{**c.extra, "id": c.id, "name": c.name} for c in gt.categories]
    out["annotations"] = [
        {
            **a.extra,
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "segmentation": _segmentation_json(a.segmentation),
            "bbox": list(a.bbox),
            "area": a.area,
        }
        for a in gt.annotations
    ]
    return out


def dumps_ground_truth(gt: GroundTruthSet) -> str:
    return _dump(ground_truth_to_json(gt))


def load_ground_truth(path: str | os.PathLike) -> GroundTruthSet:
    return parse_ground_truth(_read_json(path))


def save_ground_truth(gt: GroundTruthSet, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_ground_truth(gt))


# --------------------------------------------------------------------------
# detections

_DET_KEYS = ("image_id", "category_id", "score", "bbox", "segmentation")


def parse_detections(data: Any, gt: GroundTruthSet | None = None) -> DetectionFile:
    if isinstance(data, dict):
        schema = data.get("$schema")
        if schema != DETECTIONS_SCHEMA:
            raise ParseError(f"unsupported detections schema {schema!r}", "$schema")
        raw_records = _require(data, "detections", list, "top level")
    elif isinstance(data, list):
        raw_records = data
    else:
        raise ParseError("detections must be a JSON object or array", "top level")

    records = []
    for i, raw in enumerate(raw_records):
        where = f"detections[{i}]"
        seg = raw.get("segmentation") if isinstance(raw, dict) else None
        records.append(
            DetectionRecord(
                image_id=_require(raw, "image_id", int, where),
                category_id=_require(raw, "category_id", int, where),
                score=_require(raw, "score", (int, float), where),
                bbox=_bbox(_require(raw, "bbox", list, where), f"{where}.bbox"),
                segmentation=None if seg is None else _parse_segmentation(seg, f"{where}.segmentation"),
                extra=_extra(raw, _DET_KEYS),
            )
        )
    dets = DetectionFile(tuple(records))
    validate_detections(dets, gt)
    return dets


def validate_detections(dets: DetectionFile, gt: GroundTruthSet | None = None) -> None:
    errors: list[str] = []
    sizes = gt.image_sizes() if gt is not None else None
    for i, r in enumerate(dets.records):
        tag = f"detection {i}"
        if not (_number(r.score) and 0.0 <= r.score <= 1.0):
            errors.append(f"{tag}: score {r.score} outside [0, 1]")
        if r.bbox[2] < 0 or r.bbox[3] < 0:
            errors.append(f"{tag}: bbox has negative extent {r.bbox}")
        if sizes is not None:
            if r.image_id not in sizes:
                errors.append(f"{tag}: image {r.image_id} not in ground truth")
            elif isinstance(r.segmentation, RleMask) and r.segmentation.shape != sizes[r.image_id]:
                errors.append(
                    f"{tag}: mask size {r.segmentation.shape} != image size {sizes[r.image_id]}"
                )
    if errors:
        raise ValidationError(errors)


def detections_to_json(dets: DetectionFile) -> dict:
    records = []
    for r in dets.records:
        rec = {**r.extra, "image_id": r.image_id, "category_id": r.category_id,
               "score": r.score, "bbox": list(r.bbox)}
        if r.segmentation is not None:
            rec["segmentation"] = _segmentation_json(r.segmentation)
        records.append(rec)
    return {"$schema": DETECTIONS_SCHEMA, "detections": records}


def _as_file(dets: DetectionFile | Iterable[Detection]) -> DetectionFile:
    return dets if isinstance(dets, DetectionFile) else DetectionFile.from_detections(dets)


def dumps_detections(dets: DetectionFile | Iterable[Detection]) -> str:
    return _dump(detections_to_json(_as_file(dets)))


def load_detections(path: str | os.PathLike, gt: GroundTruthSet | None = None) -> DetectionFile:
    return parse_detections(_read_json(path), gt)


def save_detections(dets: DetectionFile | Iterable[Detection], path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_detections(dets))


# --------------------------------------------------------------------------
# splits

def subset(gt: GroundTruthSet, image_ids: Iterable[int]) -> GroundTruthSet:
    """Images in ``image_ids`` (kept in original order) with their annotations."""
    keep = set(image_ids)
    return GroundTruthSet(
        tuple(im for im in gt.images if im.id in keep),
        tuple(a for a in gt.annotations if a.image_id in keep),
        gt.categories,
        extra=dict(gt.extra),
    )


def split(gt: GroundTruthSet, sizes: Sequence[int], seed: int) -> list[GroundTruthSet]:
    """Seeded random partition of the images into parts of the given sizes.

    Image ids are sorted before shuffling so the partition depends only on
    ``(seed, set of ids)``, not on file order.
    """
    if any(s < 0 for s in sizes) or sum(sizes) != len(gt.images):
        raise SizeMismatch(f"split sizes {list(sizes)} do not sum to {len(gt.images)} images")
    ids = np.array(sorted(im.id for im in gt.images), dtype=np.int64)
    shuffled = np.random.default_rng(seed).permutation(ids).tolist()
    parts = []
    start = 0
    for n in sizes:
        parts.append(subset(gt, shuffled[start:start + n]))
        start += n
    return parts

"""Box and mask geometry: areas, IoU, polygon rasterization and RLE masks.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous pixel
coordinates; COCO ``[x, y, w, h]`` only appears at I/O boundaries. Box IoU
uses continuous areas (no ``+1`` pixel convention).

RLE masks store alternating background/foreground run lengths over the
column-major (Fortran order) flattening of an ``H x W`` bitmap, starting with
a background run. This is the same layout as COCO's uncompressed RLE.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegeneratePolygon, ShapeMismatch

__all__ = [
    "BBox",
    "Polygon",
    "RleMask",
    "box_area",
    "box_iou",
    "pairwise_box_iou",
    "polygon_to_mask",
    "polygons_to_mask",
    "mask_iou",
    "mask_intersection_union",
    "rle_encode",
    "rle_decode",
    "rle_to_string",
    "rle_from_string",
    "rle_from_counts",
]


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"negative box extent: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BBox:
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Polygon:
    """Implicitly closed polygon; ``vertices`` is a tuple of ``(x, y)``."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise ValueError(f"polygon needs at least 3 vertices, got {len(verts)}")
        if not all(math.isfinite(v) for xy in verts for v in xy):
            raise ValueError("polygon has non-finite coordinates")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> Polygon:
        """Build from COCO's flat ``[x0, y0, x1, y1, ...]`` list."""
        if len(coords) % 2:
            raise ValueError("flat polygon needs an even number of coordinates")
        return cls(tuple(zip(coords[0::2], coords[1::2])))

    def to_flat(self) -> list[float]:
        return [c for xy in self.vertices for c in xy]

    def area(self) -> float:
        """Shoelace area (absolute value)."""
        xs = np.array([v[0] for v in self.vertices])
        ys = np.array([v[1] for v in self.vertices])
        return 0.5 * abs(float(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))))

    def bbox(self) -> BBox:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return BBox(min(xs), min(ys), max(xs), max(ys))

    def is_degenerate(self) -> bool:
        """True when every vertex lies on one line."""
        pts = np.asarray(self.vertices)
        rel = pts - pts[0]
        cross = rel[1:, 0, None] * rel[None, 1:, 1] - rel[1:, 1, None] * rel[None, 1:, 0]
        scale = max(float(np.abs(rel).max()), 1.0)
        return bool(np.all(np.abs(cross) <= 1e-12 * scale * scale))


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self) -> None:
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"mask dimensions must be positive: {self.height}x{self.width}")
        if any(r < 0 for r in runs):
            raise ValueError("negative run length")
        if any(r == 0 for r in runs[1:]):
            raise ValueError("zero-length run after the leading background run")
        if sum(runs) != self.height * self.width:
            raise ValueError(
                f"runs sum to {sum(runs)}, expected {self.height * self.width}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def area(self) -> int:
        return sum(self.runs[1::2])

    def to_bitmap(self) -> np.ndarray:
        return rle_decode(self)

    @classmethod
    def from_bitmap(cls, bitmap: np.ndarray) -> RleMask:
        return rle_encode(bitmap)

    @classmethod
    def empty(cls, height: int, width: int) -> RleMask:
        return cls(height, width, (height * width,))

    def bbox(self) -> BBox:
        """Tight pixel-edge box around the foreground; zero box when empty."""
        bitmap = self.to_bitmap()
        rows = np.flatnonzero(bitmap.any(axis=1))
        cols = np.flatnonzero(bitmap.any(axis=0))
        if rows.size == 0:
            return BBox(0.0, 0.0, 0.0, 0.0)
        return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))

    def _boundaries(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.runs, dtype=np.int64))


def box_area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = box_area(a) + box_area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def pairwise_box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``(N, 4)`` and ``(M, 4)`` corner arrays.

    Evaluates the same floating-point expression as :func:`box_iou`, so
    entries are bit-identical to the scalar routine.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def rle_encode(bitmap: np.ndarray) -> RleMask:
    bitmap = np.asarray(bitmap)
    if bitmap.ndim != 2:
        raise ValueError(f"expected a 2-D bitmap, got shape {bitmap.shape}")
    h, w = bitmap.shape
    flat = bitmap.astype(bool).ravel(order="F")
    # positions where the value flips, with a virtual background pixel in front
    change = np.flatnonzero(np.diff(np.concatenate(([False], flat)).astype(np.int8)))
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges)
    return RleMask(h, w, tuple(runs.tolist()))


def rle_decode(mask: RleMask) -> np.ndarray:
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape((mask.height, mask.width), order="F")


def rle_to_string(mask: RleMask) -> str:
    """COCO compressed ``counts`` string (LEB128-like, delta coded)."""
    cnts = mask.runs
    out = []
    for i, x in enumerate(cnts):
        if i > 2:
            x -= cnts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_from_string(counts: str, height: int, width: int) -> RleMask:
    cnts: list[int] = []
    p = 0
    while p < len(counts):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(counts[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(cnts) > 2:
            x += cnts[-2]
        cnts.append(x)
    return rle_from_counts(height, width, cnts)


def rle_from_counts(height: int, width: int, runs: Iterable[int]) -> RleMask:
    """Fold zero-length interior runs so the result satisfies RleMask's invariants."""
    merged: list[int] = []
    for i, r in enumerate(runs):
        if i > 0 and r == 0:
            merged.append(0)
            continue
        if len(merged) >= 2 and merged[-1] == 0:
            merged.pop()
            merged[-1] += r
        else:
            merged.append(r)
    while len(merged) > 1 and merged[-1] == 0:
        merged.pop()
    return RleMask(height, width, tuple(merged))


def mask_intersection_union(a: RleMask, b: RleMask) -> tuple[int, int]:
    """Exact ``(|a & b|, |a | b|)`` pixel counts, computed on the runs."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    ba = a._boundaries()
    bb = b._boundaries()
    pos = np.unique(np.concatenate(([0], ba, bb)))
    starts = pos[:-1]
    # a pixel is foreground when an odd number of run boundaries precede it
    in_a = np.searchsorted(ba, starts, side="right") % 2 == 1
    in_b = np.searchsorted(bb, starts, side="right") % 2 == 1
    inter = int(np.diff(pos)[in_a & in_b].sum())
    union = a.area() + b.area() - inter
    return inter, union


def mask_iou(a: RleMask, b: RleMask) -> float:
    inter, union = mask_intersection_union(a, b)
    if union == 0:
        return 0.0
    return inter / union


def _polygon_fill(poly: Polygon, height: int, width: int) -> np.ndarray:
    """Even-odd fill sampled at pixel centers; returns an ``H x W`` bool array."""
    pts = np.asarray(poly.vertices, dtype=np.float64)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    row_y = np.arange(height) + 0.5
    col_x = np.arange(width) + 0.5

    crosses = (y0[:, None] > row_y[None, :]) != (y1[:, None] > row_y[None, :])
    edge, row = np.nonzero(crosses)
    if edge.size == 0:
        return np.zeros((height, width), dtype=bool)
    py = row_y[row]
    xs = x0[edge] + (py - y0[edge]) * (x1[edge] - x0[edge]) / (y1[edge] - y0[edge])
    # every crossing right of a pixel center flips that pixel's parity
    n_left = np.searchsorted(col_x, xs, side="left")
    toggles = np.zeros((height, width + 1), dtype=np.int32)
    np.add.at(toggles, (row, np.zeros_like(row)), 1)
    np.add.at(toggles, (row, n_left), -1)
    counts = np.cumsum(toggles, axis=1)[:, :width]
    return counts % 2 == 1


def polygon_to_mask(p: Polygon, height: int, width: int) -> RleMask:
    if height <= 0 or width <= 0:
        raise ValueError("canvas dimensions must be positive")
    if p.is_degenerate():
        warnings.warn(
            f"collinear polygon rasterized to an empty mask: {p.vertices[:3]}...",
            DegeneratePolygon,
            stacklevel=2,
        )
        return RleMask.empty(height, width)
    return rle_encode(_polygon_fill(p, height, width))


def polygons_to_mask(polys: Sequence[Polygon], height: int, width: int) -> RleMask:
    """Union of several polygons (COCO multi-part segmentation)."""
    canvas = np.zeros((height, width), dtype=bool)
    for p in polys:
        if p.is_degenerate():
            warnings.warn("collinear polygon part skipped", DegeneratePolygon, stacklevel=2)
            continue
        canvas |= _polygon_fill(p, height, width)
    return rle_encode(canvas)

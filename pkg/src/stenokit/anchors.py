"""RPN anchor grids and box-delta decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox

# exp() guard for width/height deltas
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor scales (pixels), height/width ratios and per-level strides.

    With a single stride every size is tiled on that level. With several
    strides, sizes are dealt round-robin over them (size ``i`` goes to
    ``strides[i % len(strides)]``).
    """

    sizes: tuple[float, ...] = (4, 8, 16, 32, 64)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    strides: tuple[int, ...] = (16,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sizes", tuple(self.sizes))
        object.__setattr__(self, "ratios", tuple(self.ratios))
        object.__setattr__(self, "strides", tuple(self.strides))
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ValueError(f"anchor sizes must be positive: {self.sizes}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError(f"anchor ratios must be positive: {self.ratios}")
        if not self.strides or any(int(s) != s or s <= 0 for s in self.strides):
            raise ValueError(f"strides must be positive integers: {self.strides}")

    def sizes_for_stride(self, stride: int) -> tuple[float, ...]:
        if len(self.strides) == 1:
            return self.sizes
        if stride not in self.strides:
            raise ValueError(f"stride {stride} is not one of {self.strides}")
        n = len(self.strides)
        return tuple(s for i, s in enumerate(self.sizes) if self.strides[i % n] == stride)


def anchor_array(
    cfg: AnchorConfig, level_height: int, level_width: int, stride: int
) -> np.ndarray:
    """Anchors as an ``(N, 4)`` corner array, ordered cell (row-major), size, ratio."""
    if level_height <= 0 or level_width <= 0 or stride <= 0:
        raise ValueError("level dimensions and stride must be positive")
    sizes = np.asarray(cfg.sizes_for_stride(stride), dtype=np.float64)
    ratios = np.asarray(cfg.ratios, dtype=np.float64)
    # width * height == size**2 and height / width == ratio
    ws = (sizes[:, None] / np.sqrt(ratios)[None, :]).ravel()
    hs = (sizes[:, None] * np.sqrt(ratios)[None, :]).ravel()
    base = np.stack([-ws / 2, -hs / 2, ws / 2, hs / 2], axis=1)

    cy, cx = np.meshgrid(
        (np.arange(level_height) + 0.5) * stride,
        (np.arange(level_width) + 0.5) * stride,
        indexing="ij",
    )
    centers = np.stack([cx.ravel(), cy.ravel(), cx.ravel(), cy.ravel()], axis=1)
    return (centers[:, None, :] + base[None, :, :]).reshape(-1, 4)


def generate_anchors(
    cfg: AnchorConfig, level_height: int, level_width: int, stride: int
) -> list[BBox]:
    return [BBox(*row) for row in anchor_array(cfg, level_height, level_width, stride).tolist()]


def generate_pyramid_anchors(cfg: AnchorConfig, image_height: int, image_width: int) -> list[BBox]:
    """Anchors for every configured stride, level by level."""
    out: list[BBox] = []
    for stride in cfg.strides:
        out.extend(
            generate_anchors(
                cfg, math.ceil(image_height / stride), math.ceil(image_width / stride), stride
            )
        )
    return out


def decode_deltas(anchor: BBox, deltas: Sequence[float]) -> BBox:
    dx, dy, dw, dh = deltas
    wa = anchor.x2 - anchor.x1
    ha = anchor.y2 - anchor.y1
    if wa <= 0 or ha <= 0:
        raise ValueError(f"anchor must have positive extent: {anchor}")
    cx = anchor.x1 + 0.5 * wa + dx * wa
    cy = anchor.y1 + 0.5 * ha + dy * ha
    w = wa * math.exp(min(dw, DELTA_CLAMP))
    h = ha * math.exp(min(dh, DELTA_CLAMP))
    return BBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def clip_boxes(boxes: Sequence[BBox], height: float, width: float) -> list[BBox]:
    def clamp(v: float, hi: float) -> float:
        return min(max(v, 0.0), hi)

    return [
        BBox(clamp(b.x1, width), clamp(b.y1, height), clamp(b.x2, width), clamp(b.y2, height))
        for b in boxes
    ]

"""RoI-Align: bilinear pooling of a feature map over a continuous region.

Conventions:

* aligned (half-pixel) coordinates: continuous coordinate ``c`` sits at
  pixel index ``c - 0.5``, so cell ``i`` has its center at ``i + 0.5``;
* each output bin averages ``sampling_ratio ** 2`` regularly spaced samples;
* bilinear taps that fall outside the map contribute zero (zero padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidRoi
from .geometry import BBox

BOX_HEAD_SIZE = (7, 7)
MASK_HEAD_SIZE = (14, 14)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense ``(channels, height, width)`` float64 tensor."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _interp_matrix(coords: np.ndarray, size: int) -> np.ndarray:
    """Rows of 1-D linear interpolation weights at pixel coordinates ``coords``.

    Taps outside ``[0, size)`` are dropped, which is zero padding.
    """
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    weights = np.zeros((coords.size, size))
    rows = np.arange(coords.size)
    for idx, w in ((lo, 1.0 - frac), (lo + 1, frac)):
        ok = (idx >= 0) & (idx < size)
        np.add.at(weights, (rows[ok], idx[ok]), w[ok])
    return weights


def _sample_coords(start: float, extent: float, bins: int, sampling_ratio: int) -> np.ndarray:
    step = extent / bins
    offsets = (np.arange(bins)[:, None] + (np.arange(sampling_ratio)[None, :] + 0.5) / sampling_ratio)
    return (start + offsets * step).ravel() - 0.5


def roi_align(
    fm: FeatureMap,
    roi: BBox,
    out_h: int = BOX_HEAD_SIZE[0],
    out_w: int = BOX_HEAD_SIZE[1],
    sampling_ratio: int = 2,
) -> FeatureMap:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    if sampling_ratio < 1:
        raise ValueError("sampling_ratio must be >= 1")
    if roi.x2 < roi.x1 or roi.y2 < roi.y1:
        raise InvalidRoi(f"negative RoI extent: {roi}")

    ys = _sample_coords(roi.y1, roi.y2 - roi.y1, out_h, sampling_ratio)
    xs = _sample_coords(roi.x1, roi.x2 - roi.x1, out_w, sampling_ratio)
    wy = _interp_matrix(ys, fm.height)
    wx = _interp_matrix(xs, fm.width)
    # separable bilinear: samples[c] = Wy @ F[c] @ Wx^T
    samples = np.einsum("yh,chw,xw->cyx", wy, fm.values, wx, optimize=True)
    c = fm.channels
    pooled = samples.reshape(c, out_h, sampling_ratio, out_w, sampling_ratio).mean(axis=(2, 4))
    return FeatureMap(pooled)

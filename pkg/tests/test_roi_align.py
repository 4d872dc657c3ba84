import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from stenokit.errors import InvalidRoi
from stenokit.geometry import BBox
from stenokit.roi_align import FeatureMap, roi_align


def dense_oracle(values2d: np.ndarray, roi: BBox, out_h: int, out_w: int, n: int) -> np.ndarray:
    """Bin averages of an n x n midpoint supersampling of the zero-padded
    bilinear surface, built with scipy's interpolator."""
    h, w = values2d.shape
    padded = np.pad(values2d, 1)
    # pixel centers sit at i + 0.5 in continuous coordinates
    ys = np.arange(-1, h + 1) + 0.5
    xs = np.arange(-1, w + 1) + 0.5
    interp = RegularGridInterpolator((ys, xs), padded, bounds_error=False, fill_value=0.0)
    out = np.zeros((out_h, out_w))
    bh = (roi.y2 - roi.y1) / out_h
    bw = (roi.x2 - roi.x1) / out_w
    t = (np.arange(n) + 0.5) / n
    for i in range(out_h):
        for j in range(out_w):
            py = roi.y1 + (i + t) * bh
            px = roi.x1 + (j + t) * bw
            gy, gx = np.meshgrid(py, px, indexing="ij")
            out[i, j] = interp(np.stack([gy.ravel(), gx.ravel()], axis=1)).mean()
    return out


def test_constant_map():
    fm = FeatureMap(np.full((3, 10, 12), 7.0))
    out = roi_align(fm, BBox(2.3, 1.7, 8.9, 7.2), 7, 7, 2)
    np.testing.assert_allclose(out.values, 7.0, atol=1e-12)
    assert out.values.shape == (3, 7, 7)


def test_two_by_two_center_sample():
    fm = FeatureMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = roi_align(fm, BBox(0, 0, 2, 2), 1, 1, 1)
    assert out.values[0, 0, 0] == 2.5


def test_roi_outside_is_zero():
    fm = FeatureMap(np.ones((1, 5, 5)))
    out = roi_align(fm, BBox(20, 20, 30, 30), 3, 3, 2)
    assert np.all(out.values == 0)


def test_border_samples_zero_padded():
    fm = FeatureMap(np.ones((1, 4, 4)))
    # single sample at continuous (0, 0) -> pixel (-0.5, -0.5): one tap of weight 0.25
    out = roi_align(fm, BBox(-1, -1, 1, 1), 1, 1, 1)
    assert out.values[0, 0, 0] == pytest.approx(0.25)


def test_invalid_roi():
    # BBox validates itself, so forge an inverted one to reach the guard
    bad = BBox(0, 0, 1, 1)
    object.__setattr__(bad, "x2", -1.0)
    with pytest.raises(InvalidRoi):
        roi_align(FeatureMap(np.ones((1, 3, 3))), bad, 1, 1)


def test_dense_oracle_agreement(rng):
    vals = rng.normal(size=(6, 7))
    roi = BBox(-0.7, 0.4, 6.3, 5.1)
    out = roi_align(FeatureMap(vals), roi, 3, 4, sampling_ratio=64)
    expected = dense_oracle(vals, roi, 3, 4, 200)
    np.testing.assert_allclose(out.values[0], expected, atol=1e-3)


def test_dense_oracle_converges(rng):
    vals = rng.normal(size=(5, 5))
    roi = BBox(0.3, 0.6, 4.2, 4.9)
    exact = dense_oracle(vals, roi, 2, 2, 400)
    errs = [np.abs(roi_align(FeatureMap(vals), roi, 2, 2, s).values[0] - exact).max()
            for s in (2, 8, 32)]
    assert errs[2] <= errs[0]
    assert errs[2] < 1e-3

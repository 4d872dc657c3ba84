"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
in the terminal summary (see conftest.py)."""

from __future__ import annotations

import contextlib
import csv
import json
import time
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from stenokit.cli import build_parser, main, resolve_config
from stenokit.dataset_io import (
    dumps_detections,
    dumps_ground_truth,
    parse_detections,
    parse_ground_truth,
    split,
)
from stenokit.geometry import BBox, box_iou, mask_intersection_union, mask_iou, rle_encode
from stenokit.losses import LossGains, RoiSample, assign_positive, box_loss, cls_loss, mask_loss, total_loss
from stenokit.metrics import SWEEP_GRID, seg_map
from stenokit.postprocess import Detection, PostProcessConfig, nms, run_image
from stenokit.roi_align import FeatureMap, roi_align
from stenokit.synth import SynthConfig, generate

from conftest import ACCEPTANCE_RESULTS, square_mask

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(name: str):
    """Record PASS with the detail set on the yielded dict, or FAIL with the error."""
    info = {"detail": "ok"}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE_RESULTS[name] = (False, f"{type(exc).__name__}: {exc}".splitlines()[0][:200])
        raise
    ACCEPTANCE_RESULTS[name] = (True, info["detail"])


# ---------------------------------------------------------------- 1

def _grid_counts(a, b, scale):
    """Intersection and union of two boxes by counting 1/scale cells."""
    n = int(max(a[2], a[3], b[2], b[3]) * scale) + 1
    ga = np.zeros((n, n), dtype=bool)
    gb = np.zeros((n, n), dtype=bool)
    ga[round(a[1] * scale):round(a[3] * scale), round(a[0] * scale):round(a[2] * scale)] = True
    gb[round(b[1] * scale):round(b[3] * scale), round(b[0] * scale):round(b[2] * scale)] = True
    return int((ga & gb).sum()), int((ga | gb).sum())


def test_1_geometry_oracle_equivalence():
    with criterion("1 geometry oracle equivalence") as info:
        rng = np.random.default_rng(101)
        start = time.perf_counter()
        box_mismatch = 0
        for k in range(10_000):
            # half integer boxes, half on a quarter-pixel lattice
            scale = 1 if k % 2 == 0 else 4
            v = rng.integers(0, 33 * scale, 8) / scale
            a = (min(v[0], v[2]), min(v[1], v[3]), max(v[0], v[2]), max(v[1], v[3]))
            b = (min(v[4], v[6]), min(v[5], v[7]), max(v[4], v[6]), max(v[5], v[7]))
            inter, union = _grid_counts(a, b, scale)
            expected = float(Fraction(inter, union)) if union else 0.0
            box_mismatch += box_iou(BBox(*a), BBox(*b)) != expected
        mask_mismatch = 0
        for _ in range(1_000):
            h, w = (int(x) for x in rng.integers(1, 65, 2))
            ba = rng.random((h, w)) < rng.random()
            bb = rng.random((h, w)) < rng.random()
            inter, union = int((ba & bb).sum()), int((ba | bb).sum())
            ra, rb = rle_encode(ba), rle_encode(bb)
            expected = float(Fraction(inter, union)) if union else 0.0
            ok = mask_intersection_union(ra, rb) == (inter, union) and mask_iou(ra, rb) == expected
            mask_mismatch += not ok
        elapsed = time.perf_counter() - start
        assert box_mismatch == 0, f"{box_mismatch} box pairs differ"
        assert mask_mismatch == 0, f"{mask_mismatch} mask pairs differ"
        assert elapsed < 10, f"took {elapsed:.1f}s"
        info["detail"] = f"10000 box + 1000 mask pairs exact, {elapsed:.2f}s"


# ---------------------------------------------------------------- 2

def _reference_nms(dets, threshold):
    pending = sorted(enumerate(dets), key=lambda p: (-p[1].score, p[0]))
    kept = []
    while pending:
        _, best = pending.pop(0)
        kept.append(best)
        pending = [(i, d) for i, d in pending
                   if not (d.class_id == best.class_id and d.image_id == best.image_id
                           and box_iou(d.box, best.box) > threshold)]
    return kept


def test_2_nms_reference_equivalence():
    with criterion("2 NMS reference equivalence") as info:
        rng = np.random.default_rng(202)
        pairs = 0
        for _ in range(500):
            n = int(rng.integers(0, 201))
            k = max(1, n // 6)
            centers = rng.uniform(30, 300, (k, 2))
            dets = []
            for _ in range(n):
                cx, cy = centers[rng.integers(k)] + rng.normal(0, 2, 2)
                w, h = rng.uniform(10, 50, 2)
                dets.append(Detection(int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                                      float(rng.integers(0, 41)) / 40,
                                      BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
            thr = float(rng.choice([0.3, 0.5, 0.7, 0.9, 0.95]))
            kept = nms(dets, thr)
            assert kept == _reference_nms(dets, thr)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if (a.image_id, a.class_id) == (b.image_id, b.class_id):
                        assert box_iou(a.box, b.box) <= thr
                        pairs += 1
        info["detail"] = f"500 instances equal to reference; {pairs} survivor pairs all <= threshold"


# ---------------------------------------------------------------- 3

mpmath.mp.dps = 40


def _mp_bce(pred, target):
    lo, hi = mpmath.mpf("1e-12"), 1 - mpmath.mpf("1e-12")
    acc = mpmath.mpf(0)
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(target).tolist()):
        p = min(max(mpmath.mpf(p), lo), hi)
        acc -= t * mpmath.log(p) + (1 - t) * mpmath.log(1 - p)
    return acc / np.size(pred)


def test_3_loss_correctness():
    with criterion("3 loss correctness") as info:
        rng = np.random.default_rng(303)
        worst = 0.0
        for _ in range(20):
            batch = []
            for _ in range(int(rng.integers(1, 8))):
                logits = rng.normal(size=5)
                probs = np.exp(logits) / np.exp(logits).sum()
                batch.append(RoiSample(probs, int(rng.integers(5)), tuple(rng.uniform(0, 200, 4)),
                                       tuple(rng.uniform(0, 200, 4)), rng.uniform(0, 1, (14, 14)),
                                       (rng.random((14, 14)) < 0.4).astype(float), bool(rng.random() < 0.6)))
            pos = [s for s in batch if s.is_positive]
            o_cls = sum(-mpmath.log(mpmath.mpf(float(s.class_probs[s.true_class]))) for s in batch) / len(batch)
            if pos:
                o_box = sum(sum(abs(Fraction(p) - Fraction(t)) for p, t in zip(s.pred_box, s.true_box))
                            for s in pos) / len(pos)
                o_box = mpmath.mpf(o_box.numerator) / o_box.denominator
                o_mask = sum(_mp_bce(s.pred_mask, s.target_mask) for s in pos) / len(pos)
            else:
                o_box = o_mask = mpmath.mpf(0)
            got = total_loss(batch)
            for value, oracle in ((got.cls, o_cls), (got.box, o_box), (got.mask, o_mask),
                                  (got.total, o_cls + o_box + o_mask)):
                worst = max(worst, abs(value - float(oracle)))
            # linear in each gain
            for gains in (LossGains(2.5, 1, 1), LossGains(1, 0.3, 1), LossGains(1, 1, 4.0), LossGains(0, 0, 0)):
                lin = gains.lambda_cls * got.cls + gains.lambda_box * got.box + gains.lambda_mask * got.mask
                worst = max(worst, abs(total_loss(batch, gains).total - lin))
        assert worst <= 1e-12, f"max deviation {worst:.3g}"
        assert abs(cls_loss([0.5, 0.5], 0) - 0.6931471805599453) <= 1e-15
        assert box_loss((1, 2, 3, 4), (1, 2, 3, 4)) == 0.0
        t = (rng.random((28, 28)) < 0.5).astype(float)
        perfect = mask_loss([t], [t])
        assert perfect < 1e-11
        info["detail"] = f"max deviation {worst:.2e}; -ln 0.5 ok; perfect mask loss {perfect:.1e}"


# ---------------------------------------------------------------- 4

def test_4_roi_align_kernel():
    with criterion("4 RoI-Align kernel properties") as info:
        rng = np.random.default_rng(404)
        worst = 0.0
        for _ in range(200):
            c, h, w = 2, int(rng.integers(4, 16)), int(rng.integers(4, 16))
            f = rng.normal(size=(c, h, w))
            g = rng.normal(size=(c, h, w))
            x1, x2 = sorted(rng.uniform(-3, w + 3, 2))
            y1, y2 = sorted(rng.uniform(-3, h + 3, 2))
            roi = BBox(x1, y1, x2, y2)
            oh, ow, sr = int(rng.integers(1, 8)), int(rng.integers(1, 8)), int(rng.integers(1, 4))
            # constant: RoI inside the region where every tap lands on the map
            ix1, ix2 = sorted(rng.uniform(0.5, w - 0.5, 2))
            iy1, iy2 = sorted(rng.uniform(0.5, h - 0.5, 2))
            k = float(rng.normal())
            const = roi_align(FeatureMap(np.full((c, h, w), k)), BBox(ix1, iy1, ix2, iy2), oh, ow, sr)
            worst = max(worst, float(np.abs(const.values - k).max()))
            # linearity
            a, b = rng.normal(size=2)
            lhs = roi_align(FeatureMap(a * f + b * g), roi, oh, ow, sr).values
            rhs = a * roi_align(FeatureMap(f), roi, oh, ow, sr).values + b * roi_align(FeatureMap(g), roi, oh, ow, sr).values
            worst = max(worst, float(np.abs(lhs - rhs).max()))
            # translation: embed the map at an integer offset in a larger zero map
            dy, dx = (int(v) for v in rng.integers(0, 6, 2))
            big = np.zeros((c, h + 6, w + 6))
            big[:, dy:dy + h, dx:dx + w] = f
            moved = roi_align(FeatureMap(big), BBox(x1 + dx, y1 + dy, x2 + dx, y2 + dy), oh, ow, sr).values
            worst = max(worst, float(np.abs(moved - roi_align(FeatureMap(f), roi, oh, ow, sr).values).max()))
        assert worst <= 1e-9, f"max deviation {worst:.3g}"
        hand = roi_align(FeatureMap(np.array([[1.0, 2.0], [3.0, 4.0]])), BBox(0, 0, 2, 2), 1, 1, 1)
        assert hand.values[0, 0, 0] == 2.5
        info["detail"] = f"200 cases, max deviation {worst:.2e}; 2x2 case = 2.5"


# ---------------------------------------------------------------- 5

def test_5_positive_roi_boundary():
    with criterion("5 positive RoI at IoU exactly 0.5") as info:
        roi, gt = BBox(0, 0, 2, 1), BBox(0, 0, 1, 1)
        assert box_iou(roi, gt) == 0.5
        assert assign_positive(roi, [gt]) == (True, 0)
        assert assign_positive(BBox(0, 0, 2.5, 1), [gt]) == (False, None)
        info["detail"] = "IoU 0.5 -> positive, IoU 0.4 -> negative"


# ---------------------------------------------------------------- 6

def test_6_end_to_end_known_answer(tmp_path, capsys):
    with criterion("6 end-to-end planted counts") as info:
        start = time.perf_counter()
        totals = np.zeros(3, dtype=int)
        for seed in range(20):
            d = tmp_path / f"s{seed}"
            assert main(["synth", "--seed", str(seed), "--out", str(d), "--jitter", "2",
                         "--score-min", "0.85", "--duplicate-rate", "0.5", "--dropout-rate", "0.2",
                         "--fp-rate", "0.5", "--low-score-rate", "0.5", "--twin-rate", "0.3"]) == 0
            assert main(["postprocess", "--dt", str(d / "detections.json"), "--out", str(d / "pp")]) == 0
            assert main(["evaluate", "--gt", str(d / "gt.json"), "--dt", str(d / "pp" / "detections.json"),
                         "--out", str(d / "ev")]) == 0
            planted = json.loads((d / "manifest.json").read_text())["planted"]
            report = json.loads((d / "ev" / "report.json").read_text())
            got = [report[k] for k in ("tp", "fp", "fn")]
            want = [planted[k] for k in ("tp", "fp", "fn")]
            assert got == want, f"seed {seed}: evaluated {got} != planted {want}"
            totals += got
        capsys.readouterr()
        elapsed = time.perf_counter() - start
        assert elapsed < 60, f"took {elapsed:.1f}s"
        info["detail"] = f"20 seeds exact (tp/fp/fn totals {totals.tolist()}), {elapsed:.1f}s"


# ---------------------------------------------------------------- 7

def _stage_fixture():
    """Six detections on one image; each default stage removes exactly one."""
    return [
        Detection(1, 1, 0.99, BBox(0, 0, 100, 100)),
        Detection(1, 1, 0.98, BBox(0, 0, 100, 99)),      # IoU 0.99 with the first: NMS
        Detection(1, 1, 0.97, BBox(200, 0, 260, 60)),
        Detection(1, 1, 0.90, BBox(0, 200, 60, 260)),
        Detection(1, 1, 0.85, BBox(200, 200, 260, 260)),  # fourth survivor: cap
        Detection(1, 1, 0.79, BBox(400, 400, 450, 450)),  # below 0.8: filter
    ]


def test_7_default_configuration(tmp_path, capsys):
    with criterion("7 default configuration") as info:
        cfg = resolve_config(build_parser().parse_args(["postprocess"]))
        pp = cfg.postprocess
        assert (pp.nms_iou, pp.score_threshold, pp.max_detections) == (0.95, 0.8, 3)
        assert PostProcessConfig() == pp
        dets = _stage_fixture()
        kept, counts = run_image(dets, PostProcessConfig())
        assert counts == (6, 5, 4, 3)
        assert [d.score for d in kept] == [0.99, 0.97, 0.90]
        # relaxing any single stage changes the result
        assert run_image(dets, PostProcessConfig(score_threshold=0.0, max_detections=10))[1][1] == 6
        assert [d.score for d in run_image(dets, PostProcessConfig(nms_iou=1.0))[0]] == [0.99, 0.98, 0.97]
        assert len(run_image(dets, PostProcessConfig(max_detections=10))[0]) == 4
        # and the CLI with no flags reports the same stage counts
        p = tmp_path / "dt.json"
        p.write_text(dumps_detections(dets))
        capsys.readouterr()
        assert main(["postprocess", "--dt", str(p), "--out", str(tmp_path)]) == 0
        line = capsys.readouterr().out.strip()
        assert line == "input=6 score>=0.8:5 nms@0.95:4 top3:3", line
        info["detail"] = f"nms 0.95 / score>=0.8 / top 3; stages {counts}"


# ---------------------------------------------------------------- 8

def test_8_sweep_harness(tmp_path, capsys):
    with criterion("8 NMS sweep harness") as info:
        conf = tmp_path / "twins.toml"
        conf.write_text("[synth]\nseed = 8\nnum_images = 12\ninstances_per_image = [1, 1]\ntwin_rate = 1.0\n")
        d = tmp_path / "fx"
        assert main(["synth", "--config", str(conf), "--out", str(d)]) == 0
        args = ["sweep", "--gt", str(d / "gt.json"), "--dt", str(d / "detections.json")]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
        capsys.readouterr()
        text = (tmp_path / "a" / "sweep.csv").read_text()
        assert text == (tmp_path / "b" / "sweep.csv").read_text()
        rows = list(csv.DictReader(text.splitlines()))
        assert len(rows) == 10
        assert [float(r["nms_iou"]) for r in rows] == list(SWEEP_GRID)
        f1 = {float(r["nms_iou"]): float(r["f1"]) for r in rows}
        assert f1[0.95] > f1[0.5], f"F1(0.95)={f1[0.95]} F1(0.5)={f1[0.5]}"
        info["detail"] = f"10 identical rows; F1(0.5)={f1[0.5]:.4f} < F1(0.95)={f1[0.95]:.4f}"


# ---------------------------------------------------------------- 9

def test_9_seg_map_fixture():
    with criterion("9 seg-mAP fixture") as info:
        def sq(x0, y0, x1, y1, score=1.0):
            return Detection(1, 1, score, BBox(x0, y0, x1, y1), square_mask(32, 32, x0, y0, x1, y1))

        gts = [sq(1, 1, 6, 6), sq(10, 10, 14, 14), sq(20, 20, 26, 24)]
        part = np.zeros((32, 32), dtype=bool)
        part[10:13, 10:14] = True  # 12 of the 16 pixels of the second instance
        pm = rle_encode(part)
        dets = [sq(1, 1, 6, 6, 0.9), sq(26, 2, 30, 8, 0.8),
                Detection(1, 1, 0.7, pm.bbox(), pm), sq(20, 20, 26, 24, 0.6)]
        # IoU thresholds <= 0.75: flags T F T T -> 84.25 / 101; above: T F F T -> 50.5 / 101
        expected = (6 * 84.25 + 4 * 50.5) / (10 * 101)
        got = seg_map(dets, gts)
        assert abs(got - expected) <= 1e-9, f"{got} != {expected}"
        perfect = [Detection(1, 1, 0.9, g.box, g.mask) for g in gts]
        assert seg_map(perfect, gts) == 1.0
        assert seg_map([], gts) == 0.0
        info["detail"] = f"fixture {got:.10f} (expected {expected:.10f}); perfect 1.0, empty 0.0"


# ---------------------------------------------------------------- 10

def _coco_fixture(n_images: int) -> dict:
    return {
        "info": {"description": "fixture"},
        "images": [{"id": i, "width": 512, "height": 512, "file_name": f"{i}.png"}
                   for i in range(1, n_images + 1)],
        "categories": [{"id": 1, "name": "stenosis", "supercategory": "vessel"}],
        "annotations": [
            {"id": i, "image_id": i, "category_id": 1, "iscrowd": 0,
             "segmentation": [[10.5, 10, 40, 10.25, 40, 30, 10, 30.75]],
             "bbox": [10, 10, 30, 20.75], "area": 600.0}
            for i in range(1, n_images + 1)
        ],
    }


def test_10_format_fixpoints_and_splits():
    with criterion("10 format fixpoints and splits") as info:
        synth = generate(SynthConfig(seed=10, num_images=6, jitter=2, duplicate_rate=0.5, twin_rate=0.3))
        for gt in (parse_ground_truth(_coco_fixture(3)), synth.ground_truth):
            text = dumps_ground_truth(gt)
            again = parse_ground_truth(json.loads(text))
            assert again == gt and dumps_ground_truth(again) == text
        text = dumps_detections(synth.detections)
        assert dumps_detections(parse_detections(json.loads(text))) == text
        for n, sizes in ((1200, [1190, 10]), (1000, [800, 200])):
            gt = parse_ground_truth(_coco_fixture(n))
            parts = split(gt, sizes, seed=0)
            ids = [{im.id for im in p.images} for p in parts]
            assert [len(s) for s in ids] == sizes
            assert not ids[0] & ids[1] and ids[0] | ids[1] == set(range(1, n + 1))
            again = split(gt, sizes, seed=0)
            assert [{im.id for im in p.images} for p in again] == ids
        info["detail"] = "GT + detections byte-identical; splits [1190,10] and [800,200] ok"


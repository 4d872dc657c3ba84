"""Detection F1, COCO-style segmentation mAP and the NMS-threshold sweep.

F1 conventions (all configurable): greedy one-to-one matching in descending
score order, mask IoU, match threshold 0.5 (IoU >= threshold matches),
micro-averaged over the whole dataset.

seg-mAP follows COCO: mask IoU thresholds 0.50:0.05:0.95, 101-point
interpolated precision, averaged over the classes that occur in the ground
truth. No per-image detection cap is applied.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import MissingMask
from .geometry import mask_iou, pairwise_box_iou
from .postprocess import Detection, IouKind, PostProcessConfig, run_pipeline

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# k / 100 is correctly rounded, so recall == k/100 compares as equal (linspace
# gives 0.7000000000000001 at k = 70)
RECALL_POINTS = np.arange(101) / 100
SWEEP_GRID = COCO_IOU_THRESHOLDS


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching detections to ground truth.

    Indices refer to positions in the ``dets`` / ``gts`` sequences passed to
    :func:`match_detections`.
    """

    matches: tuple[tuple[int, int], ...]
    false_positives: tuple[int, ...]
    false_negatives: tuple[int, ...]
    iou_threshold: float
    iou_kind: str
    det_keys: tuple[tuple[int, int], ...] = field(repr=False, default=())
    gt_keys: tuple[tuple[int, int], ...] = field(repr=False, default=())

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)

    def per_image(self) -> dict[int, dict[str, list]]:
        out: dict[int, dict[str, list]] = defaultdict(lambda: {"matches": [], "fp": [], "fn": []})
        for d, g in self.matches:
            out[self.det_keys[d][0]]["matches"].append((d, g))
        for d in self.false_positives:
            out[self.det_keys[d][0]]["fp"].append(d)
        for g in self.false_negatives:
            out[self.gt_keys[g][0]]["fn"].append(g)
        return {k: out[k] for k in sorted(out)}


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_from_pr(self.precision, self.recall)


@dataclass(frozen=True)
class SweepRow:
    nms_iou: float
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_class: dict[int, ClassCounts] = field(default_factory=dict)
    seg_map: float | None = None
    sweep: tuple[SweepRow, ...] = ()
    match_iou: float = 0.5
    iou_kind: str = "mask"

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "match_iou": self.match_iou,
            "iou_kind": self.iou_kind,
            "seg_map": self.seg_map,
            "per_class": {
                str(k): {"tp": c.tp, "fp": c.fp, "fn": c.fn, "precision": c.precision,
                         "recall": c.recall, "f1": c.f1}
                for k, c in sorted(self.per_class.items())
            },
            "sweep": [asdict(r) for r in self.sweep],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [
            f"matching: {self.iou_kind} IoU >= {self.match_iou}",
            f"{'class':>8} {'tp':>6} {'fp':>6} {'fn':>6} {'precision':>10} {'recall':>10} {'f1':>10}",
        ]
        for k, c in sorted(self.per_class.items()):
            lines.append(
                f"{k:>8} {c.tp:>6} {c.fp:>6} {c.fn:>6} {c.precision:>10.4f} {c.recall:>10.4f} {c.f1:>10.4f}"
            )
        lines.append(
            f"{'all':>8} {self.tp:>6} {self.fp:>6} {self.fn:>6} "
            f"{self.precision:>10.4f} {self.recall:>10.4f} {self.f1:>10.4f}"
        )
        if self.seg_map is not None:
            lines.append(f"seg-mAP@[.50:.95]: {self.seg_map:.4f}")
        for r in self.sweep:
            lines.append(f"nms_iou={r.nms_iou:.2f}  f1={r.f1:.4f}")
        return "\n".join(lines) + "\n"


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _iou_block(dets: Sequence[Detection], gts: Sequence[Detection], iou_kind: str) -> np.ndarray:
    if iou_kind == "box":
        a = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
        b = np.array([g.box.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
        return pairwise_box_iou(a, b)
    if iou_kind == "mask":
        out = np.zeros((len(dets), len(gts)))
        for i, d in enumerate(dets):
            for j, g in enumerate(gts):
                out[i, j] = mask_iou(d.mask, g.mask)
        return out
    raise ValueError(f"unknown iou_kind {iou_kind!r}")


def _check_masks(items: Iterable[Detection], what: str) -> None:
    if any(d.mask is None for d in items):
        raise MissingMask(f"mask IoU requested but some {what} have no mask")


def _gt_key(g: Detection) -> tuple:
    return (g.image_id, g.class_id, g.box.as_tuple(), g.mask.runs if g.mask is not None else ())


def _groups(items: Sequence[Detection], key) -> dict[tuple[int, int], list[int]]:
    groups: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i in sorted(range(len(items)), key=lambda i: key(items[i])):
        groups[(items[i].image_id, items[i].class_id)].append(i)
    return groups


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[Detection],
    iou_threshold: float = 0.5,
    iou_kind: IouKind = "mask",
) -> MatchResult:
    """Greedy one-to-one matching, per image and class.

    Detections are visited in canonical order (descending score); each takes
    the unmatched ground truth of highest IoU provided that IoU is at least
    ``iou_threshold``. The result does not depend on input order.
    """
    if iou_kind == "mask":
        _check_masks(dets, "detections")
        _check_masks(gts, "ground-truth instances")
    det_groups = _groups(dets, Detection.sort_key)
    gt_groups = _groups(gts, _gt_key)

    matches: list[tuple[int, int]] = []
    fps: list[int] = []
    for key, d_idx in det_groups.items():
        g_idx = gt_groups.get(key, [])
        if not g_idx:
            fps.extend(d_idx)
            continue
        iou = _iou_block([dets[i] for i in d_idx], [gts[j] for j in g_idx], iou_kind)
        taken = np.zeros(len(g_idx), dtype=bool)
        for row, di in enumerate(d_idx):
            cand = np.where(taken | (iou[row] < iou_threshold), -1.0, iou[row])
            best = int(np.argmax(cand))
            if cand[best] < 0:
                fps.append(di)
                continue
            taken[best] = True
            matches.append((di, g_idx[best]))

    matched_gt = {g for _, g in matches}
    fns = [j for j in range(len(gts)) if j not in matched_gt]
    return MatchResult(
        matches=tuple(sorted(matches)),
        false_positives=tuple(sorted(fps)),
        false_negatives=tuple(fns),
        iou_threshold=iou_threshold,
        iou_kind=iou_kind,
        det_keys=tuple((d.image_id, d.class_id) for d in dets),
        gt_keys=tuple((g.image_id, g.class_id) for g in gts),
    )


def f1_score(match: MatchResult) -> EvalReport:
    per_class: dict[int, list[int]] = defaultdict(lambda: [0, 0, 0])
    for d, _ in match.matches:
        per_class[match.det_keys[d][1]][0] += 1
    for d in match.false_positives:
        per_class[match.det_keys[d][1]][1] += 1
    for g in match.false_negatives:
        per_class[match.gt_keys[g][1]][2] += 1
    total = ClassCounts(match.tp, match.fp, match.fn)
    return EvalReport(
        precision=total.precision,
        recall=total.recall,
        f1=total.f1,
        tp=total.tp,
        fp=total.fp,
        fn=total.fn,
        per_class={k: ClassCounts(*v) for k, v in sorted(per_class.items())},
        match_iou=match.iou_threshold,
        iou_kind=match.iou_kind,
    )


def average_precision(tp_flags: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall to the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(RECALL_POINTS.size)
    ok = idx < recall.size
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def seg_map(
    dets: Sequence[Detection],
    gts: Sequence[Detection],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> float:
    _check_masks(dets, "detections")
    _check_masks(gts, "ground-truth instances")
    classes = sorted({g.class_id for g in gts})
    if not classes:
        return 0.0
    det_groups = _groups(dets, Detection.sort_key)
    gt_groups = _groups(gts, _gt_key)
    aps = []
    for cls in classes:
        keys = sorted({k for k in det_groups if k[1] == cls} | {k for k in gt_groups if k[1] == cls})
        num_gt = sum(len(gt_groups.get(k, [])) for k in keys)
        blocks = {}
        for k in keys:
            d_idx, g_idx = det_groups.get(k, []), gt_groups.get(k, [])
            if d_idx and g_idx:
                blocks[k] = _iou_block([dets[i] for i in d_idx], [gts[j] for j in g_idx], "mask")
        # all detections of this class, best score first
        order = sorted(
            ((k, row, i) for k in keys for row, i in enumerate(det_groups.get(k, []))),
            key=lambda t: Detection.sort_key(dets[t[2]]),
        )
        for t in iou_thresholds:
            taken = {k: np.zeros(len(gt_groups.get(k, [])), dtype=bool) for k in keys}
            flags = np.zeros(len(order), dtype=bool)
            for n, (k, row, _) in enumerate(order):
                if k not in blocks:
                    continue
                cand = np.where(taken[k] | (blocks[k][row] < t), -1.0, blocks[k][row])
                best = int(np.argmax(cand))
                if cand[best] >= 0:
                    taken[k][best] = True
                    flags[n] = True
            aps.append(average_precision(flags, num_gt))
    return float(np.mean(aps))


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[Detection],
    match_iou: float = 0.5,
    iou_kind: IouKind = "mask",
    with_seg_map: bool = False,
) -> EvalReport:
    report = f1_score(match_detections(dets, gts, match_iou, iou_kind))
    if with_seg_map:
        report = replace(report, seg_map=seg_map(dets, gts))
    return report


def threshold_sweep(
    raw_dets: Sequence[Detection],
    gts: Sequence[Detection],
    cfg_base: PostProcessConfig = PostProcessConfig(),
    thresholds: Sequence[float] = SWEEP_GRID,
    match_iou: float = 0.5,
    iou_kind: IouKind = "mask",
    nms_kind: IouKind = "box",
) -> list[SweepRow]:
    """Re-run post-processing at each NMS IoU and score F1; rows follow ``thresholds``."""
    rows = []
    for t in thresholds:
        kept = run_pipeline(raw_dets, replace(cfg_base, nms_iou=t), nms_kind)
        r = f1_score(match_detections(kept, gts, match_iou, iou_kind))
        rows.append(SweepRow(t, r.f1, r.precision, r.recall, r.tp, r.fp, r.fn))
    return rows

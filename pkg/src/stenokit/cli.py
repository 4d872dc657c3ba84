"""Command-line frontend: ``stenokit {postprocess,evaluate,sweep,synth,loss-check}``.

Settings resolve as built-in defaults < ``--config`` file (TOML or JSON) <
command-line flags. The built-in defaults are the tuned inference settings
(NMS IoU 0.95, score >= 0.8, 3 detections per image, match IoU 0.5).

Exit codes: 0 success, 2 bad input (parse/validation/missing mask),
1 anything else. Outputs are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .anchors import AnchorConfig
from .dataset_io import (
    GroundTruthSet,
    atomic_write_text,
    dumps_detections,
    dumps_ground_truth,
    load_detections,
    load_ground_truth,
)
from .errors import InputError, MissingMask, ParseError
from .losses import LossGains, RoiSample, total_loss
from .metrics import SWEEP_GRID, evaluate, threshold_sweep
from .postprocess import Detection, PostProcessConfig, group_by_image, run_image
from .synth import SynthConfig, generate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("stenokit")


@dataclass(frozen=True)
class RunConfig:
    gt: Path | None = None
    dt: Path | None = None
    out: Path = Path(".")
    postprocess: PostProcessConfig = PostProcessConfig()
    nms_kind: str = "box"
    match_iou: float = 0.5
    iou_kind: str = "mask"
    sweep_grid: tuple[float, ...] = SWEEP_GRID
    threads: int = 1
    log_level: str = "WARNING"
    synth: SynthConfig = SynthConfig()
    anchors: AnchorConfig = AnchorConfig()
    gains: LossGains = LossGains()


def _section(cls, data: dict[str, Any], where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", where)
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), where) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ParseError(f"invalid config {path}: {exc}") from exc

    cfg = RunConfig()
    pp = dict(data.get("postprocess", {}))
    nms_kind = pp.pop("iou_kind", cfg.nms_kind)
    metrics = data.get("metrics", {})
    run = data.get("run", {})
    updates: dict[str, Any] = {
        "postprocess": _section(PostProcessConfig, pp, "[postprocess]"),
        "nms_kind": nms_kind,
        "match_iou": metrics.get("match_iou", cfg.match_iou),
        "iou_kind": metrics.get("iou_kind", cfg.iou_kind),
        "sweep_grid": tuple(data.get("sweep", {}).get("grid", cfg.sweep_grid)),
        "threads": run.get("threads", cfg.threads),
        "log_level": run.get("log_level", cfg.log_level),
        "synth": _section(SynthConfig, data.get("synth", {}), "[synth]"),
        "anchors": _section(AnchorConfig, data.get("anchors", {}), "[anchors]"),
        "gains": _section(LossGains, data.get("gains", {}), "[gains]"),
    }
    for key in ("gt", "dt", "out"):
        if key in run:
            updates[key] = Path(run[key])
    return replace(cfg, **updates)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    pp = cfg.postprocess
    pp_updates = {
        "nms_iou": args.nms_iou,
        "score_threshold": args.score_thr,
        "max_detections": args.max_dets,
    }
    try:
        pp = replace(pp, **{k: v for k, v in pp_updates.items() if v is not None})
    except ValueError as exc:
        raise ParseError(str(exc), "command line") from exc
    updates: dict[str, Any] = {"postprocess": pp}
    for key, value in (
        ("gt", args.gt),
        ("dt", args.dt),
        ("out", args.out),
        ("match_iou", args.match_iou),
        ("iou_kind", args.iou_kind),
        ("nms_kind", args.nms_kind),
        ("threads", args.threads),
        ("log_level", args.log_level),
    ):
        if value is not None:
            updates[key] = Path(value) if key in ("gt", "dt", "out") else value
    if getattr(args, "grid", None):
        updates["sweep_grid"] = tuple(args.grid)
    cfg = replace(cfg, **updates)

    if args.command == "synth":
        synth_flags = {
            "seed": args.seed,
            "num_images": args.num_images,
            "jitter": args.jitter,
            "duplicate_rate": args.duplicate_rate,
            "dropout_rate": args.dropout_rate,
            "false_positive_rate": args.fp_rate,
            "low_score_rate": args.low_score_rate,
            "twin_rate": args.twin_rate,
        }
        if args.score_min is not None:
            synth_flags["score_range"] = (args.score_min, 1.0)
        try:
            cfg = replace(cfg, synth=replace(
                cfg.synth, **{k: v for k, v in synth_flags.items() if v is not None}
            ))
        except ValueError as exc:
            raise ParseError(str(exc), "synth options") from exc
    return cfg


# --------------------------------------------------------------------------
# commands

def _require_path(value: Path | None, flag: str) -> Path:
    if value is None:
        raise ParseError(f"{flag} is required")
    return value


def _load_inputs(cfg: RunConfig, need_gt: bool) -> tuple[GroundTruthSet | None, list[Detection]]:
    if need_gt and cfg.gt is None:
        raise ParseError("--gt is required")
    gt = load_ground_truth(cfg.gt) if cfg.gt is not None else None
    dt_file = load_detections(_require_path(cfg.dt, "--dt"), gt)
    sizes = gt.image_sizes() if gt is not None else None
    return gt, dt_file.to_detections(sizes)


def _postprocess_images(
    dets: Sequence[Detection], cfg: RunConfig
) -> tuple[list[Detection], np.ndarray]:
    groups = list(group_by_image(dets).values())
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(lambda g: run_image(g, cfg.postprocess, cfg.nms_kind), groups))
    kept = [d for r in results for d in r[0]]
    counts = np.array([r[1] for r in results], dtype=np.int64).reshape(-1, 4).sum(axis=0)
    return kept, counts


def cmd_postprocess(cfg: RunConfig) -> int:
    _, dets = _load_inputs(cfg, need_gt=False)
    kept, counts = _postprocess_images(dets, cfg)
    out = cfg.out / "detections.json"
    atomic_write_text(out, dumps_detections(kept))
    print(
        f"input={counts[0]} score>={cfg.postprocess.score_threshold}:{counts[1]} "
        f"nms@{cfg.postprocess.nms_iou}:{counts[2]} top{cfg.postprocess.max_detections}:{counts[3]}"
    )
    log.info("wrote %s", out)
    return 0


def cmd_evaluate(cfg: RunConfig, raw: bool = False, with_seg_map: bool = False) -> int:
    gt, dets = _load_inputs(cfg, need_gt=True)
    assert gt is not None
    if with_seg_map and any(d.mask is None for d in dets):
        raise MissingMask("seg-mAP requested but some detections have no segmentation")
    if not raw:
        dets, _ = _postprocess_images(dets, cfg)
    report = evaluate(dets, gt.instances(), cfg.match_iou, cfg.iou_kind, with_seg_map)
    table = report.to_table()
    atomic_write_text(cfg.out / "report.json", report.to_json())
    atomic_write_text(cfg.out / "report.txt", table)
    sys.stdout.write(table)
    return 0


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["nms_iou", "f1", "precision", "recall", "tp", "fp", "fn"])
    for r in rows:
        writer.writerow([repr(r.nms_iou), repr(r.f1), repr(r.precision), repr(r.recall), r.tp, r.fp, r.fn])
    return buf.getvalue()


def cmd_sweep(cfg: RunConfig) -> int:
    gt, dets = _load_inputs(cfg, need_gt=True)
    assert gt is not None
    rows = threshold_sweep(
        dets, gt.instances(), cfg.postprocess, cfg.sweep_grid, cfg.match_iou, cfg.iou_kind, cfg.nms_kind
    )
    text = sweep_csv(rows)
    atomic_write_text(cfg.out / "sweep.csv", text)
    sys.stdout.write(text)
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    result = generate(cfg.synth, cfg.postprocess, cfg.match_iou)
    manifest = result.manifest(cfg.synth)
    # all three files are rendered before any is written
    payloads = {
        "gt.json": dumps_ground_truth(result.ground_truth),
        "detections.json": dumps_detections(result.detections),
        "manifest.json": json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    }
    for name, text in payloads.items():
        atomic_write_text(cfg.out / name, text)
    p = result.planted
    print(f"seed={cfg.synth.seed} images={manifest['num_images']} planted tp={p.tp} fp={p.fp} fn={p.fn}")
    return 0


def _parse_samples(data: Any) -> tuple[list[RoiSample], LossGains | None]:
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise ParseError("expected an object with a 'samples' list", "top level")
    gains = _section(LossGains, data["gains"], "gains") if "gains" in data else None
    samples = []
    for i, s in enumerate(data["samples"]):
        try:
            samples.append(
                RoiSample(
                    class_probs=s["class_probs"],
                    true_class=s["true_class"],
                    pred_box=tuple(s["pred_box"]),
                    true_box=tuple(s["true_box"]),
                    pred_mask=s["pred_mask"],
                    target_mask=s["target_mask"],
                    is_positive=bool(s["is_positive"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad RoI sample: {exc}", f"samples[{i}]") from exc
    return samples, gains


def cmd_loss_check(cfg: RunConfig, samples_path: Path | None) -> int:
    path = _require_path(samples_path, "--samples")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}, column {exc.colno}") from exc
    samples, gains = _parse_samples(data)
    result = total_loss(samples, gains or cfg.gains)
    payload = {
        "total": result.total,
        "cls": result.cls,
        "box": result.box,
        "mask": result.mask,
        "num_rois": len(samples),
        "num_positive": sum(s.is_positive for s in samples),
        "gains": asdict(gains or cfg.gains),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    atomic_write_text(cfg.out / "loss.json", text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--gt", help="ground-truth COCO JSON")
    common.add_argument("--dt", help="detections JSON")
    common.add_argument("--out", help="output directory")
    common.add_argument("--nms-iou", type=float, help="RCNN NMS IoU threshold (default 0.95)")
    common.add_argument("--score-thr", type=float, help="confidence threshold (default 0.8)")
    common.add_argument("--max-dets", type=int, help="detections kept per image (default 3)")
    common.add_argument("--match-iou", type=float, help="IoU needed for a TP (default 0.5)")
    common.add_argument("--iou-kind", choices=("box", "mask"), help="IoU used for matching")
    common.add_argument("--nms-kind", choices=("box", "mask"), help="IoU used by NMS")
    common.add_argument("--threads", type=int, help="worker threads over images")
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    common.add_argument("--seed", type=int, help="synth: random seed")

    parser = argparse.ArgumentParser(prog="stenokit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("postprocess", parents=[common], help="filter -> NMS -> top-k per image")
    ev = sub.add_parser("evaluate", parents=[common], help="F1 (and optionally seg-mAP) report")
    ev.add_argument("--raw", action="store_true", help="skip post-processing")
    ev.add_argument("--seg-map", action="store_true", help="also compute seg-mAP")
    sw = sub.add_parser("sweep", parents=[common], help="F1 across NMS IoU thresholds")
    sw.add_argument("--grid", type=float, nargs="+", help="NMS IoU values (default 0.50..0.95)")
    sy = sub.add_parser("synth", parents=[common], help="write a synthetic fixture pair")
    sy.add_argument("--num-images", type=int)
    sy.add_argument("--jitter", type=float)
    sy.add_argument("--duplicate-rate", type=float)
    sy.add_argument("--dropout-rate", type=float)
    sy.add_argument("--fp-rate", type=float)
    sy.add_argument("--low-score-rate", type=float)
    sy.add_argument("--twin-rate", type=float)
    sy.add_argument("--score-min", type=float, help="true detections score in [score-min, 1]")
    lc = sub.add_parser("loss-check", parents=[common], help="evaluate the multi-task loss on RoI samples")
    lc.add_argument("--samples", type=Path, help="JSON file of RoI samples")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        logging.basicConfig(level=cfg.log_level, format="%(levelname)s %(name)s: %(message)s")
        if args.command == "postprocess":
            return cmd_postprocess(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, raw=args.raw, with_seg_map=args.seg_map)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "loss-check":
            return cmd_loss_check(cfg, args.samples)
        parser.error(f"unknown command {args.command}")
    except InputError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit code 1
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())

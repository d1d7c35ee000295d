"""Command line entry point: ``pipeline run | synth | eval``."""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
import warnings
from pathlib import Path

from . import evaluation
from .config import ConfigError, load_config
from .raster import InstanceClass, load_segmentation, rasterize


def _expand(patterns):
    out = []
    for pattern in patterns:
        hits = sorted(glob.glob(pattern))
        out.extend(hits if hits else ([pattern] if Path(pattern).exists() else []))
    return out


def _column(spec: str) -> list[float]:
    """Read ``path.csv:column`` where column is a header name or 0-based index."""
    path, sep, col = spec.rpartition(":")
    if not sep or not path:
        raise ValueError(f"expected <csv>:<column>, got {spec!r}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header = rows[0]
    if col in header:
        idx, body = header.index(col), rows[1:]
    else:
        try:
            idx = int(col)
        except ValueError:
            raise ValueError(f"{path} has no column {col!r}") from None
        body = rows[1:] if not _is_number(header[idx]) else rows
    return [float(r[idx]) for r in body if r and r[idx].strip()]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def cmd_run(args) -> int:
    from .pipeline import emit_outputs, run

    config = load_config(args.config)
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    for key in ("seed", "surf_threshold", "ratio", "ransac_thresh", "ransac_iters", "d_max", "workers"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if overrides:
        config = config.updated(**overrides)
    frames = _expand(args.frames)
    masks = _expand(args.masks)
    if not frames:
        print("no frames matched", file=sys.stderr)
        return 2
    report = run(config, frames, masks)
    emit_outputs(report, args.out)
    for frame in report.frames:
        print(f"{frame.frame_id}: {frame.status} ({len(frame.records)} plants, {frame.seconds:.2f} s)")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0 if report.ok and report.frames else 1


def cmd_synth(args) -> int:
    from .synth import SceneSpec, write_scene

    spec = SceneSpec.from_json(Path(args.spec).read_text())
    written = write_scene(spec, args.out, reference_only=not args.all_masks)
    print(json.dumps(written, indent=2))
    return 0


def cmd_mean_precision(args) -> int:
    value = evaluation.mean_precision(_column(args.detected), _column(args.truth))
    print(f"{value:.2f}")
    return 0


def _detections(path, cls):
    seg = load_segmentation(path)
    dims = (seg.height, seg.width)
    return seg, [
        evaluation.Detection(rasterize(i.rle, dims), i.score, i.cls.value)
        for i in seg.instances
        if cls is None or i.cls is cls
    ]


def cmd_ap(args) -> int:
    cls = InstanceClass(args.cls) if args.cls else None
    pred_seg, preds = _detections(args.pred, cls)
    gt_seg, truths = _detections(args.gt, cls)
    if (pred_seg.height, pred_seg.width) != (gt_seg.height, gt_seg.width):
        print("prediction and ground truth dimensions differ", file=sys.stderr)
        return 2
    masks = [t.mask for t in truths]
    if args.iou == "coco":
        if args.step:
            value = sum(evaluation.average_precision(preds, masks, t, interpolated=False)
                        for t in evaluation.COCO_IOU_THRESHOLDS) / len(evaluation.COCO_IOU_THRESHOLDS)
        else:
            value = evaluation.coco_map(preds, masks)
    else:
        value = evaluation.average_precision(preds, masks, float(args.iou), interpolated=not args.step)
    print(f"{value:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipeline", description="Cabbage head volume and leaf area from monocular video.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="depth + phenotypes for every frame with a segmentation file")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--frames", nargs="+", required=True, help="frame image paths or globs, in video order")
    p.add_argument("--masks", nargs="+", required=True, help="segmentation JSON paths or globs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="RANSAC seed")
    p.add_argument("--surf-threshold", type=float, help="Hessian response threshold")
    p.add_argument("--ratio", type=float, help="Lowe ratio for descriptor matching")
    p.add_argument("--ransac-thresh", type=float, help="Sampson inlier threshold in px")
    p.add_argument("--ransac-iters", type=int, help="maximum RANSAC iterations")
    p.add_argument("--d-max", type=int, help="disparity search range")
    p.add_argument("--workers", type=int, help="frames processed concurrently")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="render a synthetic scene")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-masks", action="store_true", help="write segmentations for every frame")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="precision statistics")
    esub = p.add_subparsers(dest="metric", required=True)
    m = esub.add_parser("mean-precision")
    m.add_argument("--detected", required=True, metavar="CSV:COL")
    m.add_argument("--truth", required=True, metavar="CSV:COL")
    m.set_defaults(func=cmd_mean_precision)
    a = esub.add_parser("ap")
    a.add_argument("--pred", required=True)
    a.add_argument("--gt", required=True)
    a.add_argument("--iou", default="0.5", help="IoU threshold or 'coco' for 0.50:0.95")
    a.add_argument("--class", dest="cls", choices=[c.value for c in InstanceClass])
    a.add_argument("--step", action="store_true",
                   help="integrate raw precision per recall step instead of the precision envelope")
    a.set_defaults(func=cmd_ap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

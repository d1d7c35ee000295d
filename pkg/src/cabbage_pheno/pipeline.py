"""Frame-triple processing: depth for each reference frame, then plant records.

For reference frame ``i`` the forward pair is ``(i, i + stride)`` and the
backward pair ``(i, i - stride)``. Each pair is matched, rectified and run
through SGM; the forward depth wins wherever it is valid.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .epipolar import estimate_fundamental, rectify, warp
from .features import SurfMatcher
from .phenometrics import PhenotypeEstimator, PlantRecord
from .raster import (
    encode_depth_png,
    encode_disparity_png,
    load_segmentation,
    read_image,
    to_gray,
    write_image,
)
from .stereo import DisparityProduct, SemiGlobalMatcher, fuse

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("frame_id", "plant_id", "diameter_cm", "volume_cm3", "n_leaves_detected", "total_LA_m2")


@dataclass
class FrameResult:
    frame_id: str
    status: str = "ok"
    records: list[PlantRecord] = field(default_factory=list)
    plant_errors: dict[int, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    depth: np.ndarray | None = None
    disparity: np.ndarray | None = None
    seconds: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status.startswith("failed")


@dataclass
class RunReport:
    frames: list[FrameResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(f.failed for f in self.frames)

    def rows(self):
        for frame in sorted(self.frames, key=lambda f: f.frame_id):
            for rec in sorted(frame.records, key=lambda r: r.plant_id):
                yield frame.frame_id, rec


def pair_disparity(ref, other, config: Config, rig, reference_id="") -> DisparityProduct:
    """Match, rectify and run SGM on ``(reference, partner)``."""
    gray_ref = to_gray(ref)
    gray_other = to_gray(other)
    matcher = SurfMatcher(threshold=config.surf_threshold, ratio=config.ratio)
    pts_ref, pts_other = matcher.correspondences(gray_ref, gray_other)
    F, inliers = estimate_fundamental(
        pts_ref, pts_other, config.ransac_thresh, config.ransac_iters, config.seed
    )
    shape = gray_ref.shape
    rp = rectify(F, pts_ref[inliers], pts_other[inliers], shape)
    left = warp(gray_ref, rp.H1, shape)
    right = warp(gray_other, rp.H2, shape)
    sgm = SemiGlobalMatcher(config.d_max, config.p1, config.p2, config.paths, config.uniqueness)
    disparity = sgm.compute(left, right)
    return DisparityProduct(
        disparity=disparity,
        H_ref=rp.H1,
        H_other=rp.H2,
        baseline_cm=rig.baseline_cm,
        reference_id=reference_id,
        meta={"matches": int(len(pts_ref)), "inliers": int(inliers.sum()), "mirrored": rp.mirrored},
    )


def process_frame(index: int, frames: list[Path], mask_path: Path, config: Config) -> FrameResult:
    t0 = time.perf_counter()
    ref_path = frames[index]
    result = FrameResult(ref_path.stem)
    try:
        ref = read_image(ref_path)
        shape = ref.shape[:2]
        seg = load_segmentation(mask_path, shape)
        if not seg.instances:
            result.status = "skipped: empty segmentation"
            result.warnings.append(f"{result.frame_id}: empty segmentation, frame skipped")
            return result
        rig = config.rig(shape)

        neighbours = []
        for step, label in ((config.frame_stride, "next"), (-config.frame_stride, "previous")):
            j = index + step
            if 0 <= j < len(frames):
                neighbours.append((label, frames[j]))
        if not neighbours:
            raise ValueError("no neighbouring frame for depth")
        if len(neighbours) == 1:
            result.status = "ok: single-pair mode"

        products = []
        for label, path in neighbours:
            try:
                products.append(pair_disparity(ref, read_image(path), config, rig, result.frame_id))
            except Exception as exc:  # noqa: BLE001 - one failed pair must not sink the frame
                result.warnings.append(f"{result.frame_id}: {label} pair failed ({exc})")
        if not products:
            raise ValueError("; ".join(result.warnings) or "no disparity")
        if len(products) < len(neighbours):
            result.status = "ok: single-pair mode"

        depth = fuse(products[0], products[1] if len(products) > 1 else None, rig, shape, config.d_min_valid)
        result.depth = depth
        with np.errstate(divide="ignore", invalid="ignore"):
            result.disparity = rig.focal_px * products[0].baseline_cm / depth

        estimator = PhenotypeEstimator(
            rig=rig,
            leaf_coefficient=config.leaf_coefficient,
            top_percentile=config.top_percentile,
            canopy_offset_cm=config.canopy_offset_cm,
            correction_factor=config.correction_factor,
        )
        records, errors = estimator.predict(seg, depth)
        result.records = records
        result.plant_errors = errors
        for rec in records:
            result.warnings.extend(f"{result.frame_id}: {w}" for w in rec.warnings)
    except Exception as exc:  # noqa: BLE001 - failures are reported per frame
        result.status = f"failed: {exc}"
        logger.warning("frame %s failed: %s", result.frame_id, exc)
    finally:
        result.seconds = time.perf_counter() - t0
    return result


def run(config: Config, frames, masks) -> RunReport:
    """Process every frame that has a segmentation file (matched by file stem)."""
    frames = [Path(p) for p in frames]
    by_stem = {Path(m).stem: Path(m) for m in masks}
    report = RunReport()
    if len(frames) < 2:
        report.warnings.append("need at least two frames for depth")
    jobs = [(i, by_stem[f.stem]) for i, f in enumerate(frames) if f.stem in by_stem]
    for stem in sorted(set(by_stem) - {f.stem for f in frames}):
        report.warnings.append(f"segmentation {stem!r} has no matching frame")
    if len(frames) == 2:
        report.warnings.append("two frames: single-pair mode")

    def work(job):
        return process_frame(job[0], frames, job[1], config)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]
    report.frames = sorted(results, key=lambda r: r.frame_id)
    for r in report.frames:
        report.warnings.extend(r.warnings)
        logger.info("frame %s: %s (%.2f s)", r.frame_id, r.status, r.seconds)
    return report


def _num(v: float) -> str:
    return f"{v:.6f}"


def plants_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for frame_id, rec in report.rows():
        writer.writerow(
            [frame_id, rec.plant_id, _num(rec.head.diameter_cm), _num(rec.head.volume_cm3),
             len(rec.leaves), _num(rec.total_leaf_area_m2)]
        )
    return buf.getvalue()


def _rounded(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def plants_json(report: RunReport) -> str:
    doc = {"frames": []}
    for frame in report.frames:
        doc["frames"].append(
            {
                "frame_id": frame.frame_id,
                "status": frame.status,
                "plants": [_rounded(r.to_dict()) for r in sorted(frame.records, key=lambda r: r.plant_id)],
                "plant_errors": {str(k): v for k, v in sorted(frame.plant_errors.items())},
                "warnings": frame.warnings,
            }
        )
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit_outputs(report: RunReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "plants.csv", out / "plants.json"]
        written[0].write_text(plants_csv(report))
        written[1].write_text(plants_json(report))
        for frame in report.frames:
            if frame.depth is None:
                continue
            dpath = out / f"disparity_{frame.frame_id}.png"
            zpath = out / f"depth_{frame.frame_id}.png"
            write_image(dpath, encode_disparity_png(frame.disparity))
            write_image(zpath, encode_depth_png(frame.depth))
            written += [dpath, zpath]
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return written

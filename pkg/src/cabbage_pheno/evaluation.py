"""Segmentation quality (mask IoU, average precision) and measurement precision."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

COCO_IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


@dataclass(frozen=True)
class Detection:
    mask: np.ndarray
    score: float = 1.0
    cls: str = ""


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _as_detection(d) -> Detection:
    if isinstance(d, Detection):
        return d
    mask, score = d
    return Detection(np.asarray(mask, dtype=bool), float(score))


def precision_recall(detections, truths, iou_thresh: float = 0.5):
    """Greedy score-ordered matching; returns ``(precision, recall)`` per rank."""
    dets = sorted((_as_detection(d) for d in detections), key=lambda d: -d.score)
    truths = [np.asarray(t, dtype=bool) for t in truths]
    if not truths:
        raise ValueError("precision/recall needs at least one ground-truth mask")
    overlaps = np.array([[iou(d.mask, t) for t in truths] for d in dets]).reshape(len(dets), len(truths))
    taken = np.zeros(len(truths), dtype=bool)
    tp = np.zeros(len(dets))
    for i in range(len(dets)):
        cand = np.where(taken, -1.0, overlaps[i])
        j = int(np.argmax(cand)) if len(truths) else -1
        if cand[j] >= iou_thresh:
            taken[j] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(dets) + 1)
    return ctp / ranks, ctp / len(truths)


def average_precision(detections, truths, iou_thresh: float = 0.5, interpolated: bool = True) -> float:
    """Area under the precision/recall curve at one IoU threshold.

    With ``interpolated`` (COCO/VOC all-point), precision at each recall is
    the best precision reached at that recall or beyond; otherwise the raw
    precision at each recall step is integrated.
    """
    precision, recall = precision_recall(detections, truths, iou_thresh)
    if precision.size == 0:
        return 0.0
    r = np.concatenate([[0.0], recall])
    p = precision.copy()
    if interpolated:
        p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum(np.diff(r) * p))


def coco_map(detections, truths, thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> float:
    """Mean of the interpolated AP over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([average_precision(detections, truths, t) for t in thresholds]))


def mean_precision(detected, truth) -> float:
    """100 minus the mean absolute percentage error of ``detected`` against ``truth``."""
    detected = np.asarray(detected, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if detected.shape != truth.shape or detected.ndim != 1 or detected.size == 0:
        raise ValueError("detected and truth must be non-empty vectors of equal length")
    if np.any(truth <= 0):
        raise ValueError("truth values must be positive")
    return float(100.0 - np.mean(100.0 * np.abs(detected - truth) / truth))

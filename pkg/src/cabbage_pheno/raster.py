"""Raster and mask primitives.

Rasters are plain numpy arrays: ``(H, W)`` uint8 luminance, ``(H, W, 3)``
uint8 RGB, or ``(H, W)`` float disparity/depth where ``INVALID`` (NaN) marks
pixels without a value. Binary masks are ``(H, W)`` bool arrays.

Segmentation masks travel as uncompressed COCO-style run lengths over the
row-major flattened image, the first run counting background pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

INVALID = np.nan


class SegmentationError(ValueError):
    """Raised when a segmentation file or run-length list cannot be decoded."""


class InstanceClass(str, Enum):
    PLANT = "plant"
    HEAD = "head"
    LEAF = "leaf"


@dataclass(frozen=True)
class Instance:
    cls: InstanceClass
    instance_id: int
    rle: tuple[int, ...]
    score: float = 1.0


@dataclass(frozen=True)
class SegmentationSet:
    frame_id: str
    width: int
    height: int
    instances: tuple[Instance, ...] = field(default_factory=tuple)

    def masks(self, cls: InstanceClass | str) -> dict[int, np.ndarray]:
        """Decode every instance of one class, keyed by instance id."""
        cls = InstanceClass(cls)
        return {
            inst.instance_id: rasterize(inst.rle, (self.height, self.width))
            for inst in self.instances
            if inst.cls is cls
        }

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame_id": self.frame_id,
                "width": self.width,
                "height": self.height,
                "instances": [_instance_doc(i) for i in self.instances],
            }
        )


def _instance_doc(inst: Instance) -> dict:
    doc = {"class": inst.cls.value, "id": inst.instance_id, "rle": list(inst.rle)}
    if inst.score != 1.0:
        doc["score"] = inst.score
    return doc


def as_valid_shape(dims: Sequence[int]) -> tuple[int, int]:
    height, width = (int(v) for v in dims)
    if height <= 0 or width <= 0:
        raise ValueError(f"raster dimensions must be positive, got {height}x{width}")
    return height, width


def rasterize(runs: Sequence[int], dims: Sequence[int]) -> np.ndarray:
    """Decode a run-length list into a boolean mask.

    Parameters
    ----------
    runs : sequence of int
        Alternating background/foreground run lengths, background first.
    dims : (height, width)

    Returns
    -------
    np.ndarray
        Boolean mask of shape ``dims``.
    """
    height, width = as_valid_shape(dims)
    counts = np.asarray(runs, dtype=np.int64)
    if counts.ndim != 1 or (counts.size and counts.min() < 0):
        raise SegmentationError("run lengths must be a flat list of non-negative integers")
    total = int(counts.sum())
    if total != height * width:
        raise SegmentationError(
            f"run lengths sum to {total}, expected {height * width} for {width}x{height}"
        )
    values = np.zeros(counts.size, dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(height, width)


def encode_rle(mask: np.ndarray) -> list[int]:
    """Encode a boolean mask as background-first run lengths (inverse of ``rasterize``)."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def parse_segmentation(content: bytes | str, dims: Sequence[int] | None = None) -> SegmentationSet:
    """Parse a segmentation JSON document.

    ``dims`` is the expected ``(height, width)`` of the processed frame; when
    given, the file's own dimensions must agree with it.
    """
    try:
        doc = json.loads(content)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SegmentationError(f"malformed segmentation JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SegmentationError("segmentation document must be a JSON object")
    try:
        frame_id = str(doc["frame_id"])
        width = int(doc["width"])
        height = int(doc["height"])
        raw_instances = doc["instances"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SegmentationError(f"segmentation document missing field: {exc}") from exc
    if dims is not None and tuple(as_valid_shape(dims)) != (height, width):
        raise SegmentationError(
            f"frame {frame_id!r} is {width}x{height}, expected {dims[1]}x{dims[0]}"
        )
    as_valid_shape((height, width))

    instances = []
    seen: set[int] = set()
    for pos, raw in enumerate(raw_instances):
        label = f"instance #{pos}"
        try:
            label = f"instance id={raw['id']}"
            inst_id = int(raw["id"])
            cls_name = raw["class"]
            runs = [int(v) for v in raw["rle"]]
            score = float(raw.get("score", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise SegmentationError(f"{label}: malformed instance ({exc})") from exc
        try:
            cls = InstanceClass(cls_name)
        except ValueError:
            raise SegmentationError(f"{label}: unknown class {cls_name!r}") from None
        if inst_id in seen:
            raise SegmentationError(f"{label}: duplicate instance id")
        seen.add(inst_id)
        try:
            rasterize(runs, (height, width))
        except SegmentationError as exc:
            raise SegmentationError(f"{label}: {exc}") from None
        instances.append(Instance(cls, inst_id, tuple(runs), score))
    return SegmentationSet(frame_id, width, height, tuple(instances))


def load_segmentation(path: str | Path, dims: Sequence[int] | None = None) -> SegmentationSet:
    return parse_segmentation(Path(path).read_bytes(), dims)


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """Mean ``(x, y)`` of the set pixel centres."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("centroid of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as float64, same value range as the input."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64)
    if img.ndim == 3 and img.shape[2] >= 3:
        rgb = img[..., :3].astype(np.float64)
        return rgb @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"unsupported image shape {img.shape}")


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=np.uint16)
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im).copy()


def write_image(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint16:
        img = img.astype(np.uint8)
    Image.fromarray(img).save(path)


def encode_disparity_png(disparity: np.ndarray) -> np.ndarray:
    """16-bit encoding ``round(d * 256)``; 0 marks invalid pixels."""
    out = np.zeros(disparity.shape, dtype=np.uint16)
    ok = np.isfinite(disparity) & (disparity > 0)
    out[ok] = np.clip(np.round(disparity[ok] * 256.0), 1, 65535).astype(np.uint16)
    return out


def decode_disparity_png(encoded: np.ndarray) -> np.ndarray:
    out = encoded.astype(np.float64) / 256.0
    out[encoded == 0] = INVALID
    return out


def encode_depth_png(depth_cm: np.ndarray) -> np.ndarray:
    """16-bit depth in millimetres; 0 marks invalid pixels."""
    out = np.zeros(depth_cm.shape, dtype=np.uint16)
    ok = np.isfinite(depth_cm) & (depth_cm > 0)
    out[ok] = np.clip(np.round(depth_cm[ok] * 10.0), 1, 65535).astype(np.uint16)
    return out

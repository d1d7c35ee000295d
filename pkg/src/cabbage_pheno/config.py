"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys and out-of-range
values are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # rig
    focal_px: float = 1000.0
    cx: float | None = None
    cy: float | None = None
    height_cm: float = 90.0
    speed_cm_s: float = 100.0
    fps: float = 60.0
    frame_stride: int = 1
    # features / RANSAC
    surf_threshold: float = 1e-3
    ratio: float = 0.7
    ransac_thresh: float = 1.0
    ransac_iters: int = 2000
    seed: int = 0
    # SGM
    d_max: int = 128
    p1: int = 10
    p2: int = 120
    paths: int = 8
    uniqueness: float = 1.05
    d_min_valid: float = 0.5
    # phenotypes
    leaf_coefficient: float = 8.3
    top_percentile: float = 5.0
    canopy_offset_cm: float = 20.0
    correction_factor: float = 1.0
    # execution
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.focal_px > 0, "focal_px must be > 0"),
            (self.height_cm > 0, "height_cm must be > 0"),
            (self.speed_cm_s > 0, "speed_cm_s must be > 0"),
            (self.fps > 0, "fps must be > 0"),
            (self.frame_stride >= 1, "frame_stride must be >= 1"),
            (self.surf_threshold > 0, "surf_threshold must be > 0"),
            (0 < self.ratio < 1, "ratio must be in (0, 1)"),
            (self.ransac_thresh > 0, "ransac_thresh must be > 0"),
            (self.ransac_iters >= 1, "ransac_iters must be >= 1"),
            (2 <= self.d_max <= 256, "d_max must be in [2, 256]"),
            (0 < self.p1 <= self.p2, "penalties must satisfy 0 < p1 <= p2"),
            (self.paths in (4, 8), "paths must be 4 or 8"),
            (self.uniqueness >= 1.0, "uniqueness must be >= 1"),
            (self.d_min_valid >= 0, "d_min_valid must be >= 0"),
            (self.leaf_coefficient >= 0, "leaf_coefficient must be >= 0"),
            (0 <= self.top_percentile <= 100, "top_percentile must be in [0, 100]"),
            (self.correction_factor > 0, "correction_factor must be > 0"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def rig(self, shape):
        from .stereo import CameraRig

        h, w = shape
        return CameraRig(
            focal_px=self.focal_px,
            cx=(w - 1) / 2.0 if self.cx is None else self.cx,
            cy=(h - 1) / 2.0 if self.cy is None else self.cy,
            height_cm=self.height_cm,
            speed_cm_s=self.speed_cm_s,
            fps=self.fps,
            frame_stride=self.frame_stride,
        )

    def updated(self, **overrides) -> "Config":
        return dataclasses.replace(self, **_coerce(overrides))


def _coerce(raw: dict) -> dict:
    types = {f.name: f.type for f in fields(Config)}
    out = {}
    for key, value in raw.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if not isinstance(value, str):
            out[key] = value
            continue
        value = value.strip()
        kind = types[key]
        try:
            if "None" in kind and value.lower() in ("", "none", "auto"):
                out[key] = None
            elif kind.startswith("int"):
                out[key] = int(value)
            else:
                out[key] = float(value)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
    return out


def parse_config(text: str) -> Config:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        raw[key] = value
    return Config(**_coerce(raw))


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())

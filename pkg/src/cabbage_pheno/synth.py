"""Synthetic nadir scenes with exact ground truth.

A scene is a pinhole rig translating along +x over fronto-parallel planes,
spheres (cabbage heads) and planar leaf polygons. Each object carries a
seeded, band-limited noise texture fixed to world coordinates, so every view
of the same surface point shows the same intensity.

Scene JSON::

    {"width": 640, "height": 480,
     "rig": {"focal_px": 700, "cx": 319.5, "cy": 239.5, "frame_stride": 1, ...},
     "n_frames": 3,
     "objects": [
        {"type": "plane", "depth": 90, "seed": 1},
        {"type": "sphere", "center": [0, 0, 68], "radius": 8, "seed": 2, "plant": 1},
        {"type": "leaf", "polygon": [[x, y], ...], "depth": 76,
         "attachment": [x, y, z], "tip": [x, y, z], "seed": 3, "plant": 1}]}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import phenometrics as pm
from .raster import Instance, InstanceClass, SegmentationSet, encode_rle
from .stereo import CameraRig

MIN_DEPTH_CM = 10.0
TEXTURE_CELLS = 512

COLORS = {
    "plane": (110, 85, 60),
    "sphere": (140, 165, 115),
    "leaf": (60, 130, 60),
}


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    rig: CameraRig
    width: int
    height: int
    objects: list[dict] = field(default_factory=list)
    n_frames: int = 3
    texture_cm: float = 0.25

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        rig = CameraRig(**doc["rig"])
        spec = cls(
            rig=rig,
            width=int(doc["width"]),
            height=int(doc["height"]),
            objects=[dict(o) for o in doc.get("objects", [])],
            n_frames=int(doc.get("n_frames", 3)),
            texture_cm=float(doc.get("texture_cm", 0.25)),
        )
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        r = self.rig
        return {
            "width": self.width,
            "height": self.height,
            "n_frames": self.n_frames,
            "texture_cm": self.texture_cm,
            "rig": {
                "focal_px": r.focal_px, "cx": r.cx, "cy": r.cy, "height_cm": r.height_cm,
                "speed_cm_s": r.speed_cm_s, "fps": r.fps, "frame_stride": r.frame_stride,
            },
            "objects": self.objects,
        }

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise SceneError("scene dimensions must be positive")
        for i, obj in enumerate(self.objects):
            kind = obj.get("type")
            if kind == "plane":
                near = float(obj["depth"])
                limit_ok = near <= self.rig.height_cm
            elif kind == "sphere":
                near = float(obj["center"][2]) - float(obj["radius"])
                limit_ok = near < self.rig.height_cm
            elif kind == "leaf":
                near = float(obj["depth"])
                limit_ok = near < self.rig.height_cm
                if len(obj["polygon"]) < 3:
                    raise SceneError(f"object {i}: leaf polygon needs >= 3 vertices")
            else:
                raise SceneError(f"object {i}: unknown type {kind!r}")
            if near <= 0:
                raise SceneError(f"object {i} ({kind}) is behind the camera")
            if near <= MIN_DEPTH_CM or not limit_ok:
                raise SceneError(
                    f"object {i} ({kind}) at {near:.1f} cm must lie between {MIN_DEPTH_CM} cm "
                    f"and the ground at {self.rig.height_cm} cm"
                )


# ----------------------------------------------------------------------------
# rendering


def _texture(seed: int, X: np.ndarray, Y: np.ndarray, cell_cm: float) -> np.ndarray:
    """Band-limited noise in [0, 1] sampled at world coordinates (cm)."""
    rng = np.random.default_rng(seed)
    grid = ndimage.gaussian_filter(rng.standard_normal((TEXTURE_CELLS, TEXTURE_CELLS)), 0.7, mode="wrap")
    grid = (grid - grid.mean()) / grid.std()
    coords = np.stack([Y.ravel() / cell_cm, X.ravel() / cell_cm])
    vals = ndimage.map_coordinates(grid, coords, order=3, mode="grid-wrap").reshape(X.shape)
    return np.clip(0.5 + 0.18 * vals, 0.0, 1.0)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > py) != (y1 > py)
        xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def render_view(spec: SceneSpec, camera_x: float):
    """Ray-cast one view from a camera at ``(camera_x, 0, 0)``.

    Returns ``(rgb uint8, depth cm, object index map)``; pixels hitting nothing
    get depth NaN and index -1.
    """
    rig = spec.rig
    v, u = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    dx = (u - rig.cx) / rig.focal_px
    dy = (v - rig.cy) / rig.focal_px
    depth = np.full(u.shape, np.inf)
    owner = np.full(u.shape, -1, dtype=np.int64)

    for idx, obj in enumerate(spec.objects):
        kind = obj["type"]
        if kind == "plane":
            z = np.full(u.shape, float(obj["depth"]))
        elif kind == "leaf":
            zl = float(obj["depth"])
            X = camera_x + dx * zl
            Y = dy * zl
            hit = _points_in_polygon(X, Y, np.asarray(obj["polygon"], dtype=np.float64))
            z = np.where(hit, zl, np.inf)
        else:
            cx, cy, cz = (float(c) for c in obj["center"])
            r = float(obj["radius"])
            ox = camera_x - cx
            # |o + t*dir - c|^2 = r^2 with dir = (dx, dy, 1)
            a = dx**2 + dy**2 + 1.0
            b = 2.0 * (dx * ox + dy * (-cy) + (-cz))
            c = ox**2 + cy**2 + cz**2 - r**2
            disc = b**2 - 4 * a * c
            with np.errstate(invalid="ignore"):
                t = (-b - np.sqrt(disc)) / (2 * a)
            z = np.where((disc >= 0) & (t > 0), t, np.inf)
        closer = z < depth
        depth = np.where(closer, z, depth)
        owner = np.where(closer, idx, owner)

    rgb = np.zeros(u.shape + (3,), dtype=np.float64)
    for idx, obj in enumerate(spec.objects):
        sel = owner == idx
        if not sel.any():
            continue
        z = depth[sel]
        X = camera_x + dx[sel] * z
        Y = dy[sel] * z
        tex = _texture(int(obj.get("seed", idx)), X, Y, spec.texture_cm)
        base = np.asarray(obj.get("color", COLORS[obj["type"]]), dtype=np.float64)
        rgb[sel] = base[None, :] * (0.4 + 1.2 * tex[:, None])
    depth[~np.isfinite(depth)] = np.nan
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8), depth, owner


def camera_positions(spec: SceneSpec) -> list[float]:
    """Camera x positions (cm) of the frames, centred on the reference frame."""
    b = spec.rig.baseline_cm
    first = -(spec.n_frames // 2)
    return [b * (first + k) for k in range(spec.n_frames)]


def segmentation_from_owner(spec: SceneSpec, owner: np.ndarray, frame_id: str) -> SegmentationSet:
    """Instance masks of the visible silhouettes: one plant, head and leaf set per plant group."""
    groups: dict[int, list[int]] = {}
    for idx, obj in enumerate(spec.objects):
        if obj["type"] in ("sphere", "leaf"):
            groups.setdefault(int(obj.get("plant", 1)), []).append(idx)
    instances = []
    next_id = 1
    for plant in sorted(groups):
        plant_mask = np.isin(owner, groups[plant])
        members = []
        for idx in groups[plant]:
            mask = owner == idx
            if not mask.any():
                continue
            cls = InstanceClass.HEAD if spec.objects[idx]["type"] == "sphere" else InstanceClass.LEAF
            members.append((cls, mask))
        if not plant_mask.any():
            continue
        instances.append(Instance(InstanceClass.PLANT, next_id, tuple(encode_rle(plant_mask))))
        next_id += 1
        for cls, mask in members:
            instances.append(Instance(cls, next_id, tuple(encode_rle(mask))))
            next_id += 1
    return SegmentationSet(frame_id, spec.width, spec.height, tuple(instances))


def render_pair(spec: SceneSpec):
    """Reference view at x=0 and the next view one baseline further along +x.

    Returns ``(frame_a, frame_b, gt_disparity, gt_segmentation)``; the
    disparity is ``focal_px * baseline / Z`` on frame a's grid.
    """
    spec.validate()
    rgb_a, depth_a, owner_a = render_view(spec, 0.0)
    rgb_b, _, _ = render_view(spec, spec.rig.baseline_cm)
    disparity = spec.rig.focal_px * spec.rig.baseline_cm / depth_a
    return rgb_a, rgb_b, disparity, segmentation_from_owner(spec, owner_a, "frame_a")


def render_sequence(spec: SceneSpec):
    """All frames of the spec as ``[(frame_id, rgb, depth, segmentation)]``."""
    spec.validate()
    out = []
    for k, x in enumerate(camera_positions(spec)):
        rgb, depth, owner = render_view(spec, x)
        fid = f"frame_{k:03d}"
        out.append((fid, rgb, depth, segmentation_from_owner(spec, owner, fid)))
    return out


# ----------------------------------------------------------------------------
# ground truth


def scene_truth(spec: SceneSpec, coefficient: float = pm.LEAF_AREA_COEFFICIENT) -> list[pm.PlantRecord]:
    """Analytic records: one sphere per plant group plus its leaves."""
    groups: dict[int, dict] = {}
    for obj in spec.objects:
        if obj["type"] == "plane":
            continue
        g = groups.setdefault(int(obj.get("plant", 1)), {"spheres": [], "leaves": []})
        g["spheres" if obj["type"] == "sphere" else "leaves"].append(obj)
    if not groups:
        raise SceneError("scene has no cabbage (sphere + leaves)")
    rig = spec.rig
    records = []
    for pid, g in sorted(groups.items()):
        if len(g["spheres"]) != 1:
            raise SceneError(f"plant {pid} must have exactly one sphere, has {len(g['spheres'])}")
        sph = g["spheres"][0]
        cx, cy, cz = (float(c) for c in sph["center"])
        r = float(sph["radius"])
        r_px = rig.focal_px * r / cz
        head = pm.HeadGeometry(
            centroid=(rig.cx + rig.focal_px * cx / cz, rig.cy + rig.focal_px * cy / cz),
            area_px=int(round(math.pi * r_px**2)),
            radius_px=r_px,
            z_top_cm=cz - r,
            equator_depth_cm=cz,
            radius_cm=r,
            volume_cm3=pm.sphere_volume(r),
        )
        record = pm.PlantRecord(plant_id=pid, head=head)
        for i, leaf in enumerate(g["leaves"]):
            p = tuple(float(c) for c in leaf["attachment"])
            q = tuple(float(c) for c in leaf["tip"])
            tip_px = (rig.cx + rig.focal_px * q[0] / q[2], rig.cy + rig.focal_px * q[1] / q[2])
            record.leaves.append(pm.LeafGeometry(i, tip_px, p, q, pm.leaf_length(p, q)))
        lengths = [leaf.length_cm for leaf in record.leaves]
        for leaf in record.leaves:
            leaf.area_cm2 = pm.leaf_area(lengths, leaf.length_cm, coefficient)
        records.append(record)
    return records


def leaf_polygon(base_xy, angle: float, start: float, length: float, width: float) -> list[list[float]]:
    """Pointed leaf outline from ``start`` to ``start + length`` cm along ``angle``."""
    ux, uy = math.cos(angle), math.sin(angle)
    vx, vy = -uy, ux
    profile = [(0.0, 0.0), (0.15, 0.35), (0.45, 0.5), (0.75, 0.35), (1.0, 0.0)]
    right = [(start + s * length, w * width) for s, w in profile]
    left = [(start + s * length, -w * width) for s, w in reversed(profile[1:-1])]
    out = []
    for a, b in right + left:
        out.append([base_xy[0] + a * ux + b * vx, base_xy[1] + a * uy + b * vy])
    return out


def cabbage_scene(rig: CameraRig, width: int, height: int, radius: float = 8.0,
                  center=(0.0, 0.0, 68.0), leaf_depths=(76.0, 78.0, 80.0),
                  leaf_reach: float = 24.0, leaf_width: float = 9.0, seed: int = 0,
                  n_frames: int = 3) -> SceneSpec:
    """Soil plane, one spherical head and planar leaves radiating from under it.

    Each leaf starts under the head and ends in a tip ``leaf_reach`` cm from
    the head axis; its attachment is the head's bottom pole.
    """
    cx, cy, cz = center
    objects = [{"type": "plane", "depth": rig.height_cm, "seed": seed + 1}]
    objects.append({"type": "sphere", "center": [cx, cy, cz], "radius": radius, "seed": seed + 2, "plant": 1})
    n = len(leaf_depths)
    for i, z in enumerate(leaf_depths):
        angle = 2 * math.pi * i / n + 0.3
        start = 0.3 * radius
        poly = leaf_polygon((cx, cy), angle, start, leaf_reach - start, leaf_width)
        tip = [cx + leaf_reach * math.cos(angle), cy + leaf_reach * math.sin(angle), z]
        objects.append(
            {
                "type": "leaf", "polygon": poly, "depth": z,
                "attachment": [cx, cy, cz + radius], "tip": tip,
                "seed": seed + 10 + i, "plant": 1,
            }
        )
    spec = SceneSpec(rig=rig, width=width, height=height, objects=objects, n_frames=n_frames)
    spec.validate()
    return spec


def write_scene(spec: SceneSpec, out_dir: str | Path, reference_only: bool = True) -> dict:
    """Render the spec to PNG frames, segmentation JSON and ground truth files."""
    from .raster import encode_disparity_png, write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = render_sequence(spec)
    ref = len(frames) // 2
    written = {"frames": [], "masks": []}
    for k, (fid, rgb, depth, seg) in enumerate(frames):
        path = out / f"{fid}.png"
        write_image(path, rgb)
        written["frames"].append(str(path))
        if not reference_only or k == ref:
            mpath = out / f"{fid}.json"
            mpath.write_text(seg.to_json())
            written["masks"].append(str(mpath))
        if k == ref:
            disp = spec.rig.focal_px * spec.rig.baseline_cm / depth
            write_image(out / f"gt_disparity_{fid}.png", encode_disparity_png(disp))
    truth = [r.to_dict() for r in scene_truth(spec)] if any(o["type"] == "sphere" for o in spec.objects) else []
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2))
    return written

"""Per-plant phenotypes: head diameter and volume, leaf length and leaf area.

Units: lengths in cm, volumes in cm^3, leaf areas in cm^2 per leaf and m^2
per plant. 3-D points are ``(X, Y, Z)`` in cm in the camera frame, ``Z``
being the distance from the camera (so a larger height above ground is a
smaller ``Z``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .raster import InstanceClass, SegmentationSet, mask_area, mask_centroid
from .stereo import CameraRig

logger = logging.getLogger(__name__)

LEAF_AREA_COEFFICIENT = 8.3


class PhenotypeError(ValueError):
    pass


@dataclass
class HeadGeometry:
    centroid: tuple[float, float]
    area_px: int
    radius_px: float
    z_top_cm: float
    equator_depth_cm: float
    radius_cm: float
    volume_cm3: float
    depth_fallback: bool = False

    @property
    def diameter_cm(self) -> float:
        return 2.0 * self.radius_cm


@dataclass
class LeafGeometry:
    instance_id: int
    tip_px: tuple[float, float]
    p: tuple[float, float, float]
    q: tuple[float, float, float]
    length_cm: float
    area_cm2: float = 0.0


@dataclass
class PlantRecord:
    plant_id: int
    head: HeadGeometry
    leaves: list[LeafGeometry] = field(default_factory=list)
    correction_factor: float = 1.0
    warnings: list[str] = field(default_factory=list)

    @property
    def total_leaf_area_m2(self) -> float:
        return self.correction_factor * sum(leaf.area_cm2 for leaf in self.leaves) / 1e4

    def to_dict(self) -> dict:
        out = asdict(self)
        out["head"]["diameter_cm"] = self.head.diameter_cm
        out["total_leaf_area_m2"] = self.total_leaf_area_m2
        return out


# ----------------------------------------------------------------------------
# head


def head_radius_px(head_mask: np.ndarray) -> float:
    """Radius of the circle with the same area as the segmented cross-section."""
    area = mask_area(head_mask)
    if area == 0:
        raise PhenotypeError("empty head mask")
    return math.sqrt(area / math.pi)


def top_depth(mask: np.ndarray, depth: np.ndarray, percentile: float = 5.0, min_valid: float = 0.2) -> float:
    """Low percentile of the valid depths under ``mask`` (the surface closest to the camera)."""
    values = depth[mask]
    valid = values[np.isfinite(values)]
    if values.size == 0 or valid.size < min_valid * values.size:
        raise PhenotypeError(
            f"only {valid.size} of {values.size} head pixels have depth (need {min_valid:.0%})"
        )
    return float(np.percentile(valid, percentile))


def equator_depth(head_mask, depth, radius_cm_estimate: float, percentile: float = 5.0) -> float:
    """Camera-to-equator distance: the head top depth plus one radius."""
    return top_depth(head_mask, depth, percentile) + radius_cm_estimate


def px_to_cm(r_px: float, H_cm: float, rig: CameraRig) -> float:
    """Convert an image length to cm at camera distance ``H_cm``: ``r_px * k * H``."""
    if H_cm <= 0:
        raise PhenotypeError(f"camera distance must be positive, got {H_cm}")
    return r_px * rig.k * H_cm


def head_radius_cm(r_px: float, z_top_cm: float, rig: CameraRig) -> float:
    """Solve ``r = px_to_cm(r_px, z_top + r)`` for ``r``."""
    if r_px >= rig.focal_px:
        raise PhenotypeError("head radius in pixels exceeds the focal length")
    return r_px * z_top_cm / (rig.focal_px - r_px)


def sphere_volume(radius_cm: float) -> float:
    if radius_cm < 0:
        raise PhenotypeError("radius must be non-negative")
    return 4.0 / 3.0 * math.pi * radius_cm**3


def head_geometry(head_mask, depth, rig: CameraRig, percentile: float = 5.0,
                  fallback_z_top: float | None = None) -> HeadGeometry:
    """Centroid, metric radius and volume of a segmented head.

    When the head has too little valid depth and ``fallback_z_top`` is given,
    that value stands in for the measured top depth and the result is flagged.
    """
    r_px = head_radius_px(head_mask)
    centroid = mask_centroid(head_mask)
    fallback = False
    try:
        z_top = top_depth(head_mask, depth, percentile)
    except PhenotypeError:
        if fallback_z_top is None:
            raise
        z_top = fallback_z_top
        fallback = True
    r_cm = head_radius_cm(r_px, z_top, rig)
    return HeadGeometry(
        centroid=centroid,
        area_px=mask_area(head_mask),
        radius_px=r_px,
        z_top_cm=z_top,
        equator_depth_cm=z_top + r_cm,
        radius_cm=r_cm,
        volume_cm3=sphere_volume(r_cm),
        depth_fallback=fallback,
    )


def gt_volume_from_circumference(c_cm: float) -> float:
    if c_cm < 0:
        raise PhenotypeError("circumference must be non-negative")
    return sphere_volume(c_cm / (2.0 * math.pi))


def gt_area_from_reference(object_px: float, ref_px: float, ref_cm2: float) -> float:
    """Area of an object photographed on the same plane as a reference of known size."""
    if ref_px <= 0:
        raise PhenotypeError("reference object must cover at least one pixel")
    return object_px * ref_cm2 / ref_px


# ----------------------------------------------------------------------------
# leaves


def assign_leaves(plant_masks: dict[int, np.ndarray] | np.ndarray,
                  leaves: dict[int, np.ndarray] | list[np.ndarray]) -> dict:
    """Assign each leaf to the plant holding more than half of its pixels.

    With a single plant mask, returns the list of assigned leaf keys. With a
    dict of plant masks, returns ``{leaf_key: plant_id}``; when several plants
    qualify the larger overlap fraction wins, ties going to the lower plant id.
    """
    single = not isinstance(plant_masks, dict)
    plants = {0: plant_masks} if single else plant_masks
    items = leaves.items() if isinstance(leaves, dict) else enumerate(leaves)
    out = {}
    for key, leaf in items:
        area = mask_area(leaf)
        if area == 0:
            logger.warning("leaf %s has an empty mask; skipped", key)
            continue
        best = None
        for pid in sorted(plants):
            frac = mask_area(leaf & plants[pid]) / area
            if frac > 0.5 and (best is None or frac > best[1]):
                best = (pid, frac)
        if best is not None:
            out[key] = best[0]
    return list(out) if single else out


def to_camera(x_px: float, y_px: float, z_cm: float, rig: CameraRig) -> tuple[float, float, float]:
    """Back-project pixel ``(x, y)`` at camera distance ``z`` to cm."""
    return (px_to_cm(x_px - rig.cx, z_cm, rig), px_to_cm(y_px - rig.cy, z_cm, rig), float(z_cm))


def leaf_attachment(head: HeadGeometry, rig: CameraRig) -> tuple[float, float, float]:
    """Leaf base: below the head centre, at the bottom pole of the spherical head."""
    z = head.z_top_cm + 2.0 * head.radius_cm
    return to_camera(head.centroid[0], head.centroid[1], z, rig)


def leaf_tip(leaf_mask, head_centroid, depth, rig: CameraRig):
    """Leaf end point and its pixel.

    Planar position: the leaf pixel farthest from the head centre (lowest flat
    index on ties). Depth: the smallest valid camera distance over the leaf.
    Returns ``(q, (x_px, y_px))``.
    """
    ys, xs = np.nonzero(leaf_mask)
    if xs.size == 0:
        raise PhenotypeError("empty leaf mask")
    z = depth[ys, xs]
    z = z[np.isfinite(z)]
    if z.size == 0:
        raise PhenotypeError("leaf has no valid depth")
    d2 = (xs - head_centroid[0]) ** 2 + (ys - head_centroid[1]) ** 2
    i = int(np.argmax(d2))  # nonzero() is in flat order, argmax keeps the first
    z_min = float(z.min())
    return to_camera(float(xs[i]), float(ys[i]), z_min, rig), (float(xs[i]), float(ys[i]))


def leaf_length(p, q) -> float:
    return math.dist(p, q)


def leaf_area(all_lengths, L: float, coefficient: float = LEAF_AREA_COEFFICIENT) -> float:
    """Leaf area (cm^2): half the mean leaf length of the plant plus ``coefficient * L``."""
    lengths = list(all_lengths)
    if not lengths:
        raise PhenotypeError("leaf area needs at least one leaf length")
    return (sum(lengths) / len(lengths)) / 2.0 + coefficient * L


# ----------------------------------------------------------------------------
# composition


def plant_record(plant_id, head_mask, leaf_masks: dict[int, np.ndarray], depth, rig: CameraRig,
                 coefficient: float = LEAF_AREA_COEFFICIENT, percentile: float = 5.0,
                 fallback_z_top: float | None = None, correction_factor: float = 1.0) -> PlantRecord:
    """Phenotypes of one plant from its head mask and already-assigned leaves."""
    head = head_geometry(head_mask, depth, rig, percentile, fallback_z_top)
    record = PlantRecord(plant_id=plant_id, head=head, correction_factor=correction_factor)
    if head.depth_fallback:
        record.warnings.append(f"plant {plant_id}: head depth fallback to {fallback_z_top:.1f} cm")
    p = leaf_attachment(head, rig)
    for leaf_id in sorted(leaf_masks):
        try:
            q, tip_px = leaf_tip(leaf_masks[leaf_id], head.centroid, depth, rig)
        except PhenotypeError as exc:
            record.warnings.append(f"plant {plant_id}, leaf {leaf_id}: {exc}")
            continue
        record.leaves.append(LeafGeometry(leaf_id, tip_px, p, q, leaf_length(p, q)))
    lengths = [leaf.length_cm for leaf in record.leaves]
    for leaf in record.leaves:
        leaf.area_cm2 = leaf_area(lengths, leaf.length_cm, coefficient)
    return record


class PhenotypeEstimator(BaseEstimator):
    """Per-plant records from one frame's segmentation and depth map.

    Parameters
    ----------
    rig : CameraRig
    leaf_coefficient : float
        Multiplier of the leaf length in the leaf-area model.
    top_percentile : float
        Percentile of head depths taken as the head top.
    canopy_offset_cm : float
        Head top assumed at ``rig.height_cm - canopy_offset_cm`` when the head
        has no usable depth.
    correction_factor : float
        Scales total leaf area for leaves that are never visible.
    """

    def __init__(self, rig=None, leaf_coefficient=LEAF_AREA_COEFFICIENT, top_percentile=5.0,
                 canopy_offset_cm=20.0, correction_factor=1.0):
        self.rig = rig
        self.leaf_coefficient = leaf_coefficient
        self.top_percentile = top_percentile
        self.canopy_offset_cm = canopy_offset_cm
        self.correction_factor = correction_factor

    def predict(self, segmentation: SegmentationSet, depth: np.ndarray):
        """Return ``(records, errors)``; ``errors`` maps plant id to a message."""
        if self.rig is None:
            raise ValueError("PhenotypeEstimator needs a CameraRig")
        if depth.shape != (segmentation.height, segmentation.width):
            raise ValueError(
                f"depth map {depth.shape} does not match segmentation {segmentation.height}x{segmentation.width}"
            )
        plants = segmentation.masks(InstanceClass.PLANT)
        heads = segmentation.masks(InstanceClass.HEAD)
        leaves = segmentation.masks(InstanceClass.LEAF)
        head_owner = assign_leaves(plants, heads)
        leaf_owner = assign_leaves(plants, leaves)

        records, errors = [], {}
        for pid in sorted(plants):
            own_heads = [hid for hid, owner in head_owner.items() if owner == pid]
            if not own_heads:
                errors[pid] = "no head instance inside the plant"
                continue
            head_mask = np.zeros_like(plants[pid])
            for hid in own_heads:
                head_mask |= heads[hid]
            own_leaves = {lid: leaves[lid] for lid, owner in leaf_owner.items() if owner == pid}
            try:
                records.append(
                    plant_record(
                        pid, head_mask, own_leaves, depth, self.rig,
                        coefficient=self.leaf_coefficient,
                        percentile=self.top_percentile,
                        fallback_z_top=self.rig.height_cm - self.canopy_offset_cm,
                        correction_factor=self.correction_factor,
                    )
                )
            except PhenotypeError as exc:
                errors[pid] = str(exc)
        return records, errors

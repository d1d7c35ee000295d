"""Upright SURF keypoints and descriptors, ratio-test matching.

Box-filter Hessian responses are evaluated at every pixel for the union of
the filter sizes of the first three SURF octaves (9..99 px). Non-maximum
suppression then runs over that single sorted scale stack, which keeps one
detection per blob even where octaves overlap in scale.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .raster import to_gray

logger = logging.getLogger(__name__)

OCTAVE_SIZES = ((9, 15, 21, 27), (15, 27, 39, 51), (27, 51, 75, 99), (51, 99, 147, 195))
MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    response: float
    orientation: float = 0.0


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


def integral_image(img: np.ndarray) -> np.ndarray:
    ii = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=ii[1:, 1:])
    return ii


def _box(ii, y0, x0, y1, x1):
    """Sum of pixels in rows [y0, y1) and columns [x0, x1), coordinates clamped."""
    h, w = ii.shape[0] - 1, ii.shape[1] - 1
    y0 = np.clip(y0, 0, h)
    y1 = np.clip(y1, 0, h)
    x0 = np.clip(x0, 0, w)
    x1 = np.clip(x1, 0, w)
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def _window(ii, size, dy0, dx0, dy1, dx1):
    """Box sum over offsets [dy0, dy1] x [dx0, dx1] (inclusive) for every pixel
    whose full ``size`` filter fits in the image; zero elsewhere."""
    h, w = ii.shape[0] - 1, ii.shape[1] - 1
    r = size // 2
    out = np.zeros((h, w))
    if h <= 2 * r or w <= 2 * r:
        return out
    ys = slice(r, h - r)
    xs = slice(r, w - r)
    ny, nx = h - 2 * r, w - 2 * r
    a = ii[r + dy0 : r + dy0 + ny, r + dx0 : r + dx0 + nx]
    b = ii[r + dy0 : r + dy0 + ny, r + dx1 + 1 : r + dx1 + 1 + nx]
    c = ii[r + dy1 + 1 : r + dy1 + 1 + ny, r + dx0 : r + dx0 + nx]
    d = ii[r + dy1 + 1 : r + dy1 + 1 + ny, r + dx1 + 1 : r + dx1 + 1 + nx]
    out[ys, xs] = d - b - c + a
    return out


def hessian_response(ii: np.ndarray, size: int) -> np.ndarray:
    """Approximated det(H) for a ``size`` x ``size`` box filter (size = 3 * odd lobe)."""
    lobe = size // 3
    half = size // 2
    wide = lobe - 1
    mid = (lobe - 1) // 2
    # Dyy: full column strip minus 3x the middle lobe
    dyy = _window(ii, size, -half, -wide, half, wide) - 3.0 * _window(ii, size, -mid, -wide, mid, wide)
    dxx = _window(ii, size, -wide, -half, wide, half) - 3.0 * _window(ii, size, -wide, -mid, wide, mid)
    dxy = (
        _window(ii, size, -lobe, -lobe, -1, -1)
        + _window(ii, size, 1, 1, lobe, lobe)
        - _window(ii, size, -lobe, 1, -1, lobe)
        - _window(ii, size, 1, -lobe, lobe, -1)
    )
    area = float(size * size)
    dxx /= area
    dyy /= area
    dxy /= area
    return dxx * dyy - (0.9 * dxy) ** 2


def _refine(stack, layer, y, x):
    """Quadratic fit of the response around a discrete maximum; returns offsets (ds, dy, dx)."""
    c = stack[layer, y, x]
    g = 0.5 * np.array(
        [
            stack[layer + 1, y, x] - stack[layer - 1, y, x],
            stack[layer, y + 1, x] - stack[layer, y - 1, x],
            stack[layer, y, x + 1] - stack[layer, y, x - 1],
        ]
    )
    dss = stack[layer + 1, y, x] + stack[layer - 1, y, x] - 2 * c
    dyy = stack[layer, y + 1, x] + stack[layer, y - 1, x] - 2 * c
    dxx = stack[layer, y, x + 1] + stack[layer, y, x - 1] - 2 * c
    dsy = 0.25 * (stack[layer + 1, y + 1, x] - stack[layer + 1, y - 1, x] - stack[layer - 1, y + 1, x] + stack[layer - 1, y - 1, x])
    dsx = 0.25 * (stack[layer + 1, y, x + 1] - stack[layer + 1, y, x - 1] - stack[layer - 1, y, x + 1] + stack[layer - 1, y, x - 1])
    dyx = 0.25 * (stack[layer, y + 1, x + 1] - stack[layer, y + 1, x - 1] - stack[layer, y - 1, x + 1] + stack[layer, y - 1, x - 1])
    H = np.array([[dss, dsy, dsx], [dsy, dyy, dyx], [dsx, dyx, dxx]])
    try:
        return -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.zeros(3)


def detect(img: np.ndarray, threshold: float = 1e-3, n_octaves: int = 3) -> list[Keypoint]:
    """Scale-space maxima of the box-filter Hessian determinant.

    ``threshold`` applies to responses of the image rescaled to unit dynamic
    range. Keypoints come back sorted by descending response, then ``y``, ``x``.
    """
    gray = to_gray(img)
    if min(gray.shape) < MIN_IMAGE_SIDE:
        raise ValueError(f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {gray.shape}")
    if not 1 <= n_octaves <= len(OCTAVE_SIZES):
        raise ValueError(f"n_octaves must be in [1, {len(OCTAVE_SIZES)}]")
    lo, hi = float(gray.min()), float(gray.max())
    if hi - lo <= 0:
        return []
    ii = integral_image((gray - lo) / (hi - lo))

    sizes = sorted({s for octave in OCTAVE_SIZES[:n_octaves] for s in octave})
    sizes = [s for s in sizes if s < min(gray.shape)]
    if len(sizes) < 3:
        return []
    stack = np.stack([hessian_response(ii, s) for s in sizes])
    peak = ndimage.maximum_filter(stack, size=3, mode="constant", cval=-np.inf)
    cand = (stack == peak) & (stack > threshold)
    cand[0] = cand[-1] = False
    for i, s in enumerate(sizes):
        # the neighbouring layer must be evaluated there too
        m = sizes[min(i + 1, len(sizes) - 1)] // 2 + 1
        cand[i, :m] = cand[i, -m:] = False
        cand[i, :, :m] = cand[i, :, -m:] = False

    keypoints = []
    size_axis = np.arange(len(sizes), dtype=float)
    for layer, y, x in zip(*np.nonzero(cand)):
        ds, dy, dx = _refine(stack, layer, y, x)
        if max(abs(ds), abs(dy), abs(dx)) >= 1.0:
            continue
        size = np.interp(layer + ds, size_axis, sizes)
        keypoints.append(
            Keypoint(
                x=float(x + dx),
                y=float(y + dy),
                scale=float(1.2 * size / 9.0),
                response=float(stack[layer, y, x]),
            )
        )
    keypoints.sort(key=lambda k: (-k.response, k.y, k.x))
    return keypoints


def describe(img: np.ndarray, keypoints: list[Keypoint]) -> tuple[list[Keypoint], np.ndarray]:
    """64-d upright SURF descriptors.

    Returns the keypoints that were kept (those at least ``10 * scale`` from
    every border) together with a ``(n, 64)`` array of unit-norm descriptors.
    """
    gray = to_gray(img)
    h, w = gray.shape
    kept = [
        k
        for k in keypoints
        if k.x - 10 * k.scale >= 0 and k.y - 10 * k.scale >= 0
        and k.x + 10 * k.scale <= w - 1 and k.y + 10 * k.scale <= h - 1
    ]
    if len(kept) < len(keypoints):
        logger.debug("describe: dropped %d keypoints near the border", len(keypoints) - len(kept))
    if not kept:
        return [], np.zeros((0, 64))
    ii = integral_image(gray)

    xs = np.array([k.x for k in kept])[:, None, None]
    ys = np.array([k.y for k in kept])[:, None, None]
    sc = np.array([k.scale for k in kept])[:, None, None]
    offs = np.arange(20) - 9.5
    gy, gx = np.meshgrid(offs, offs, indexing="ij")
    px = np.rint(xs + gx * sc).astype(int)
    py = np.rint(ys + gy * sc).astype(int)
    half = np.maximum(np.rint(sc), 1).astype(int)

    hx = _box(ii, py - half, px, py + half, px + half) - _box(ii, py - half, px - half, py + half, px)
    hy = _box(ii, py, px - half, py + half, px + half) - _box(ii, py - half, px - half, py, px + half)
    weight = np.exp(-(gx**2 + gy**2) / (2 * 3.3**2))
    hx = hx * weight
    hy = hy * weight

    n = len(kept)
    blocks = lambda a: a.reshape(n, 4, 5, 4, 5).sum(axis=(2, 4))  # noqa: E731
    desc = np.stack([blocks(hx), blocks(hy), blocks(np.abs(hx)), blocks(np.abs(hy))], axis=-1)
    desc = desc.reshape(n, 64)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return kept, desc / norm


def match(desc_a: np.ndarray, desc_b: np.ndarray, ratio: float = 0.7) -> list[Match]:
    """Nearest neighbour in ``desc_b`` for each row of ``desc_a``, kept when
    ``d1 / d2 < ratio``."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    if len(desc_b) < 2 or len(desc_a) == 0:
        return []
    matches = []
    chunk = 1024
    bb = np.einsum("ij,ij->i", desc_b, desc_b)
    for start in range(0, len(desc_a), chunk):
        a = desc_a[start : start + chunk]
        d2 = np.einsum("ij,ij->i", a, a)[:, None] + bb[None, :] - 2.0 * a @ desc_b.T
        d2 = np.maximum(d2, 0.0)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :2]
        rows = np.arange(len(a))
        d1 = np.sqrt(d2[rows, nn[:, 0]])
        dn = np.sqrt(d2[rows, nn[:, 1]])
        ok = d1 < ratio * dn
        for i in np.flatnonzero(ok):
            matches.append(Match(start + int(i), int(nn[i, 0]), float(d1[i])))
    return matches


class SurfMatcher(BaseEstimator):
    """Detect, describe and match two frames; yields point correspondences.

    Parameters
    ----------
    threshold : float
        Hessian response threshold on the unit-range image.
    ratio : float
        Lowe ratio-test threshold.
    n_octaves : int
    """

    def __init__(self, threshold=1e-3, ratio=0.7, n_octaves=3):
        self.threshold = threshold
        self.ratio = ratio
        self.n_octaves = n_octaves

    def correspondences(self, img_a, img_b):
        """Return ``(pts_a, pts_b)`` as ``(n, 2)`` arrays of matched ``(x, y)``."""
        kps_a, desc_a = describe(img_a, detect(img_a, self.threshold, self.n_octaves))
        kps_b, desc_b = describe(img_b, detect(img_b, self.threshold, self.n_octaves))
        matches = match(desc_a, desc_b, self.ratio)
        pts_a = np.array([(kps_a[m.index_a].x, kps_a[m.index_a].y) for m in matches]).reshape(-1, 2)
        pts_b = np.array([(kps_b[m.index_b].x, kps_b[m.index_b].y) for m in matches]).reshape(-1, 2)
        return pts_a, pts_b

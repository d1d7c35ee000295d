"""Semi-global matching, two-pair fusion and disparity-to-depth scaling.

Cost volumes are ``(H, W, D)`` integer arrays indexed ``cost[y, x, d]`` where
``d`` pairs ``left[y, x]`` with ``right[y, x - d]``. The census window is
5x5 (24 comparison bits); disparities whose right pixel falls outside the
image, or on an invalid right pixel, get ``CENSUS_OUT_OF_RANGE``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator

from .raster import INVALID

CENSUS_BITS = 24
CENSUS_OUT_OF_RANGE = CENSUS_BITS + 1

PATHS_4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
PATHS_8 = PATHS_4 + ((1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class CameraRig:
    """Nadir camera moving at constant speed and height.

    ``k`` is the pixel-to-metric constant: one pixel spans ``k * Z`` cm at a
    camera distance of ``Z`` cm (pinhole ground sample distance).
    """

    focal_px: float
    cx: float = 0.0
    cy: float = 0.0
    height_cm: float = 90.0
    speed_cm_s: float = 100.0
    fps: float = 60.0
    frame_stride: int = 1

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal_px must be positive")
        if self.speed_cm_s <= 0 or self.fps <= 0 or self.height_cm <= 0:
            raise ValueError("speed, fps and height must be positive")
        if int(self.frame_stride) != self.frame_stride or self.frame_stride < 1:
            raise ValueError("frame_stride must be an integer >= 1")

    @property
    def baseline_cm(self) -> float:
        return self.speed_cm_s * self.frame_stride / self.fps

    @property
    def k(self) -> float:
        return 1.0 / self.focal_px


@dataclass
class DisparityProduct:
    """Disparity of one rectified pair plus what is needed to undo rectification.

    ``disparity`` lives on the rectified grid of the reference image.
    ``H_ref`` / ``H_other`` map original reference / partner-frame pixels to
    rectified coordinates.
    """

    disparity: np.ndarray
    H_ref: np.ndarray
    H_other: np.ndarray
    baseline_cm: float
    reference_id: str = ""
    meta: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# matching cost


@numba.njit(cache=True, parallel=True)
def _census_signatures(img):
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.uint32)
    for y in numba.prange(h):
        for x in range(w):
            c = img[y, x]
            sig = np.uint32(0)
            for dy in range(-2, 3):
                yy = min(max(y + dy, 0), h - 1)
                for dx in range(-2, 3):
                    if dy == 0 and dx == 0:
                        continue
                    xx = min(max(x + dx, 0), w - 1)
                    sig = (sig << np.uint32(1)) | np.uint32(img[yy, xx] < c)
            out[y, x] = sig
    return out


@numba.njit(cache=True, inline="always")
def _popcount(v):
    v = v - ((v >> np.uint32(1)) & np.uint32(0x55555555))
    v = (v & np.uint32(0x33333333)) + ((v >> np.uint32(2)) & np.uint32(0x33333333))
    v = (v + (v >> np.uint32(4))) & np.uint32(0x0F0F0F0F)
    return (v * np.uint32(0x01010101)) >> np.uint32(24)


@numba.njit(cache=True, parallel=True)
def _census_volume(sig_l, sig_r, right_ok, d_max):
    h, w = sig_l.shape
    cost = np.empty((h, w, d_max), dtype=np.uint8)
    for y in numba.prange(h):
        for x in range(w):
            s = sig_l[y, x]
            for d in range(d_max):
                xr = x - d
                if xr < 0 or not right_ok[y, xr]:
                    cost[y, x, d] = CENSUS_OUT_OF_RANGE
                else:
                    cost[y, x, d] = _popcount(s ^ sig_r[y, xr])
    return cost


def census_transform(img: np.ndarray) -> np.ndarray:
    """24-bit 5x5 census signature per pixel (edge-replicated borders)."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    return _census_signatures(np.nan_to_num(img, nan=0.0))


def census_cost(
    left: np.ndarray,
    right: np.ndarray,
    d_max: int,
    right_valid: np.ndarray | None = None,
) -> np.ndarray:
    """Hamming distance between census signatures of ``left(x, y)`` and ``right(x - d, y)``."""
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape or left.ndim != 2:
        raise ValueError(f"rectified images must be 2-D and equal in shape: {left.shape} vs {right.shape}")
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    if right_valid is None:
        right_valid = np.isfinite(right) if right.dtype.kind == "f" else np.ones(right.shape, bool)
    sig_l = census_transform(left)
    sig_r = census_transform(right)
    return _census_volume(sig_l, sig_r, np.ascontiguousarray(right_valid, dtype=np.bool_), int(d_max))


# ----------------------------------------------------------------------------
# aggregation


@numba.njit(cache=True, inline="always")
def _path_step(cost_px, prev, prev_min, out, acc, P1, P2):
    # L(p,d) = C(p,d) + min(L(p-r,d), L(p-r,d±1)+P1, min_k L(p-r,k)+P2) - min_k L(p-r,k)
    n = cost_px.shape[0]
    jump = prev_min + P2
    cur_min = np.int32(2**31 - 1)
    for d in range(n):
        best = prev[d]
        if d > 0:
            v = prev[d - 1] + P1
            if v < best:
                best = v
        if d < n - 1:
            v = prev[d + 1] + P1
            if v < best:
                best = v
        if jump < best:
            best = jump
        val = np.int32(cost_px[d]) + best - prev_min
        out[d] = val
        acc[d] += val
        if val < cur_min:
            cur_min = val
    return cur_min


@numba.njit(cache=True, inline="always")
def _path_start(cost_px, out, acc):
    n = cost_px.shape[0]
    cur_min = np.int32(2**31 - 1)
    for d in range(n):
        val = np.int32(cost_px[d])
        out[d] = val
        acc[d] += val
        if val < cur_min:
            cur_min = val
    return cur_min


@numba.njit(cache=True, parallel=True)
def _aggregate_horizontal(cost, acc, dx, P1, P2):
    h, w, n = cost.shape
    for y in numba.prange(h):
        a = np.empty(n, dtype=np.int32)
        b = np.empty(n, dtype=np.int32)
        x = 0 if dx > 0 else w - 1
        m = _path_start(cost[y, x], a, acc[y, x])
        for _ in range(1, w):
            x += dx
            m = _path_step(cost[y, x], a, m, b, acc[y, x], P1, P2)
            a, b = b, a


@numba.njit(cache=True, parallel=True)
def _aggregate_row_sweep(cost, acc, dx, dy, P1, P2):
    # Paths with a vertical component: rows depend on the previous row only.
    h, w, n = cost.shape
    prev = np.empty((w, n), dtype=np.int32)
    cur = np.empty((w, n), dtype=np.int32)
    prev_min = np.empty(w, dtype=np.int32)
    cur_min = np.empty(w, dtype=np.int32)
    y = 0 if dy > 0 else h - 1
    for x in numba.prange(w):
        prev_min[x] = _path_start(cost[y, x], prev[x], acc[y, x])
    for _ in range(1, h):
        y += dy
        for x in numba.prange(w):
            xp = x - dx
            if xp < 0 or xp >= w:
                cur_min[x] = _path_start(cost[y, x], cur[x], acc[y, x])
            else:
                cur_min[x] = _path_step(cost[y, x], prev[xp], prev_min[xp], cur[x], acc[y, x], P1, P2)
        prev, cur = cur, prev
        prev_min, cur_min = cur_min, prev_min


def aggregate(
    cost: np.ndarray,
    P1: int = 10,
    P2: int = 120,
    paths: int = 8,
) -> np.ndarray:
    """Sum of per-direction SGM path costs.

    Directions are processed in a fixed order with integer arithmetic, so the
    result does not depend on the thread count.
    """
    cost = np.asarray(cost)
    if cost.ndim != 3:
        raise ValueError("cost volume must be (H, W, D)")
    if cost.dtype.kind not in "iu" or (cost.size and cost.min() < 0):
        raise ValueError("cost volume must hold non-negative integers")
    if not (0 < P1 <= P2):
        raise ValueError(f"penalties must satisfy 0 < P1 <= P2, got P1={P1}, P2={P2}")
    if paths not in (4, 8):
        raise ValueError("paths must be 4 or 8")
    directions = PATHS_8 if paths == 8 else PATHS_4
    c_max = int(cost.max()) if cost.size else 0
    # every L_r is bounded by max C + P2
    dtype = np.uint16 if paths * (c_max + P2) < 2**16 else np.int64
    cost = np.ascontiguousarray(cost, dtype=np.uint8 if c_max < 256 else np.int32)
    acc = np.zeros(cost.shape, dtype=dtype)
    for dx, dy in directions:
        aggregate_path(cost, acc, dx, dy, P1, P2)
    return acc


def aggregate_path(cost, acc, dx, dy, P1, P2):
    """Accumulate a single path direction ``(dx, dy)`` into ``acc`` in place."""
    if dy == 0:
        _aggregate_horizontal(cost, acc, np.int64(dx), np.int32(P1), np.int32(P2))
    else:
        _aggregate_row_sweep(cost, acc, np.int64(dx), np.int64(dy), np.int32(P1), np.int32(P2))
    return acc


# ----------------------------------------------------------------------------
# disparity selection


@numba.njit(cache=True, parallel=True)
def _select(S, uniqueness, out):
    h, w, n = S.shape
    for y in numba.prange(h):
        for x in range(w):
            s = S[y, x]
            best = 0
            for d in range(1, n):
                if s[d] < s[best]:
                    best = d
            m1 = np.float64(s[best])
            m2 = np.inf
            for d in range(n):
                if d < best - 1 or d > best + 1:
                    if s[d] < m2:
                        m2 = np.float64(s[d])
            if m2 != np.inf:
                if m1 == 0.0:
                    ratio = 1.0 if m2 == 0.0 else np.inf
                else:
                    ratio = m2 / m1
                if ratio < uniqueness:
                    out[y, x] = np.nan
                    continue
            if n > 1 and (best == 0 or best == n - 1):
                out[y, x] = np.nan
                continue
            if n < 3:
                out[y, x] = best
                continue
            a = np.float64(s[best - 1])
            b = np.float64(s[best])
            c = np.float64(s[best + 1])
            denom = 2.0 * (a - 2.0 * b + c)
            out[y, x] = best + ((a - c) / denom if denom > 0 else 0.0)


def select_disparity(S: np.ndarray, uniqueness: float = 1.05) -> np.ndarray:
    """Winner-take-all disparity with parabola subpixel refinement.

    The smallest ``d`` wins ties. A pixel is invalid (NaN) when the best cost
    outside ``d* ± 1`` is less than ``uniqueness`` times the winner, or when
    ``d*`` sits on the first or last disparity.
    """
    if uniqueness < 1.0:
        raise ValueError("uniqueness must be >= 1.0")
    S = np.ascontiguousarray(S)
    out = np.empty(S.shape[:2], dtype=np.float64)
    _select(S, float(uniqueness), out)
    return out


class SemiGlobalMatcher(BaseEstimator):
    """Census + SGM disparity for a rectified pair.

    Parameters
    ----------
    d_max : int
        Number of disparity hypotheses, ``d`` in ``[0, d_max)``.
    P1, P2 : int
        Penalties for one-step and larger disparity changes along a path.
    paths : {4, 8}
    uniqueness : float
        Minimum ratio of second-best to best aggregated cost.
    """

    def __init__(self, d_max=128, P1=10, P2=120, paths=8, uniqueness=1.05):
        self.d_max = d_max
        self.P1 = P1
        self.P2 = P2
        self.paths = paths
        self.uniqueness = uniqueness

    def compute(self, left, right, left_valid=None, right_valid=None):
        if left_valid is None and np.asarray(left).dtype.kind == "f":
            left_valid = np.isfinite(left)
        cost = census_cost(left, right, self.d_max, right_valid)
        S = aggregate(cost, self.P1, self.P2, self.paths)
        disp = select_disparity(S, self.uniqueness)
        if left_valid is not None:
            disp[~np.asarray(left_valid, bool)] = INVALID
        return disp


# ----------------------------------------------------------------------------
# depth


def disparity_to_depth(disparity, rig: CameraRig, baseline_cm: float, d_min_valid: float = 0.5):
    """Pinhole triangulation ``Z = f * B / d`` in cm; ``d <= d_min_valid`` is invalid."""
    d = np.asarray(disparity, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = rig.focal_px * baseline_cm / d
    z = np.where(np.isfinite(d) & (d > d_min_valid), z, INVALID)
    return float(z) if z.ndim == 0 else z


def _apply_h(H, x, y):
    u = H[0, 0] * x + H[0, 1] * y + H[0, 2]
    v = H[1, 0] * x + H[1, 1] * y + H[1, 2]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    return u / w, v / w


def product_depth(product: DisparityProduct, rig: CameraRig, shape, d_min_valid: float = 0.5):
    """Depth of one pair resampled onto the original reference-frame grid.

    Each reference pixel is carried into rectified coordinates, the rectified
    disparity at the nearest grid cell locates its partner, and both points are
    carried back to original coordinates. Their separation is the disparity a
    pure baseline translation would produce, which then triangulates with the
    pair's own baseline.
    """
    h, w = shape
    disp = product.disparity
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = _apply_h(product.H_ref, xs, ys)
    ui = np.rint(u)
    vi = np.rint(v)
    inside = (ui >= 0) & (ui < disp.shape[1]) & (vi >= 0) & (vi < disp.shape[0])
    d = np.full((h, w), np.nan)
    d[inside] = disp[vi[inside].astype(int), ui[inside].astype(int)]
    H_back = np.linalg.inv(product.H_other)
    xo, yo = _apply_h(H_back, u - d, v)
    orig_disp = np.hypot(xs - xo, ys - yo)
    return disparity_to_depth(orig_disp, rig, product.baseline_cm, d_min_valid)


def fuse(
    primary: DisparityProduct,
    secondary: DisparityProduct | None,
    rig: CameraRig,
    shape,
    d_min_valid: float = 0.5,
) -> np.ndarray:
    """Depth of the reference frame: forward pair where valid, else backward pair."""
    if secondary is not None and secondary.reference_id != primary.reference_id:
        raise ValueError(
            f"products reference different frames: {primary.reference_id!r} vs {secondary.reference_id!r}"
        )
    depth = product_depth(primary, rig, shape, d_min_valid)
    if secondary is None:
        return depth
    fallback = product_depth(secondary, rig, shape, d_min_valid)
    return np.where(np.isfinite(depth), depth, fallback)

"""Fundamental-matrix estimation and projective rectification.

Points are ``(n, 2)`` arrays of ``(x, y)`` pixel coordinates. ``F`` follows
the convention ``x2^T F x1 = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils import check_array


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RectifyingPair:
    H1: np.ndarray
    H2: np.ndarray
    shape: tuple[int, int]
    mirrored: bool = False


def to_homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = to_homogeneous(np.asarray(pts, dtype=np.float64)) @ H.T
    return p[:, :2] / p[:, 2:3]


def hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with RMS distance sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    s = np.sqrt(2.0) / rms if rms > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _canonical(F: np.ndarray) -> np.ndarray:
    F = F / np.linalg.norm(F)
    flat = F.ravel()
    i = int(np.argmax(np.abs(flat)))
    return F if flat[i] >= 0 else -F


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(F)
    s[2] = 0.0
    return U @ np.diag(s) @ Vt


def eight_point(pts1: np.ndarray, pts2: np.ndarray) -> np.ndarray:
    """Normalized 8-point estimate from ``n >= 8`` correspondences, rank 2 and unit Frobenius norm."""
    pts1 = np.asarray(pts1, dtype=np.float64)
    pts2 = np.asarray(pts2, dtype=np.float64)
    if len(pts1) < 8 or len(pts1) != len(pts2):
        raise ValueError("eight_point needs >= 8 matched points")
    T1 = hartley_normalization(pts1)
    T2 = hartley_normalization(pts2)
    a = apply_homography(T1, pts1)
    b = apply_homography(T2, pts2)
    A = np.column_stack(
        [
            b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0],
            b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1],
            a[:, 0], a[:, 1], np.ones(len(a)),
        ]
    )
    _, _, Vt = np.linalg.svd(A)
    F = enforce_rank2(Vt[-1].reshape(3, 3))
    F = T2.T @ F @ T1
    return _canonical(enforce_rank2(F))


def sampson_distance(F: np.ndarray, pts1: np.ndarray, pts2: np.ndarray) -> np.ndarray:
    """First-order geometric error in pixels (square root of the Sampson error)."""
    x1 = to_homogeneous(np.asarray(pts1, dtype=np.float64))
    x2 = to_homogeneous(np.asarray(pts2, dtype=np.float64))
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.sum(x2 * Fx1, axis=1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(den > 0, num / den, np.where(num > 0, np.inf, 0.0))
    return np.sqrt(err)


class FundamentalRANSAC(BaseEstimator):
    """RANSAC over normalized 8-point samples with Sampson scoring.

    Parameters
    ----------
    inlier_thresh : float
        Sampson distance (px) below which a correspondence is an inlier.
    max_iters : int
        Upper bound on hypotheses; the adaptive count usually stops earlier.
    confidence : float
        Probability of drawing at least one all-inlier sample.
    seed : int
        Seed for the sample generator.

    Attributes
    ----------
    F_ : ndarray of shape (3, 3)
    inlier_mask_ : ndarray of bool
    n_iter_ : int
    """

    def __init__(self, inlier_thresh=1.0, max_iters=2000, confidence=0.999, seed=0):
        self.inlier_thresh = inlier_thresh
        self.max_iters = max_iters
        self.confidence = confidence
        self.seed = seed

    def fit(self, pts1, pts2):
        pts1 = check_array(pts1, dtype=np.float64, ensure_min_samples=1)
        pts2 = check_array(pts2, dtype=np.float64, ensure_min_samples=1)
        if pts1.shape != pts2.shape or pts1.shape[1] != 2:
            raise ValueError("pts1 and pts2 must both be (n, 2)")
        n = len(pts1)
        if n < 8:
            raise ValueError(f"need at least 8 correspondences, got {n}")
        rng = np.random.default_rng(self.seed)

        best_mask = None
        best_key = (-1, np.inf)
        limit = self.max_iters
        it = 0
        while it < limit:
            it += 1
            sample = rng.choice(n, 8, replace=False)
            try:
                F = eight_point(pts1[sample], pts2[sample])
            except np.linalg.LinAlgError:
                continue
            err = sampson_distance(F, pts1, pts2)
            mask = err <= self.inlier_thresh
            count = int(mask.sum())
            key = (count, float(np.sum(err[mask])))
            if count > best_key[0] or (count == best_key[0] and key[1] < best_key[1]):
                best_key = key
                best_mask = mask
                w = count / n
                if w >= 1.0:
                    limit = it
                elif w > 0:
                    need = np.log(1 - self.confidence) / np.log(1 - w**8)
                    limit = min(self.max_iters, int(np.ceil(need)))
        if best_mask is None or best_key[0] < 8:
            raise DegenerateGeometryError("degenerate geometry: no consensus of >= 8 inliers")

        mask = best_mask
        for _ in range(5):
            F = eight_point(pts1[mask], pts2[mask])
            new_mask = sampson_distance(F, pts1, pts2) <= self.inlier_thresh
            if new_mask.sum() < 8:
                break
            if np.array_equal(new_mask, mask):
                break
            mask = new_mask
        F = eight_point(pts1[mask], pts2[mask])
        self.F_ = F
        self.inlier_mask_ = sampson_distance(F, pts1, pts2) <= self.inlier_thresh
        self.n_iter_ = it
        return self


def estimate_fundamental(pts1, pts2, inlier_thresh=1.0, max_iters=2000, seed=0):
    """Return ``(F, inlier_mask)``; see :class:`FundamentalRANSAC`."""
    est = FundamentalRANSAC(inlier_thresh=inlier_thresh, max_iters=max_iters, seed=seed).fit(pts1, pts2)
    return est.F_, est.inlier_mask_


def epipoles(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm homogeneous epipoles ``(e1, e2)`` with ``F e1 = 0`` and ``F^T e2 = 0``."""
    U, _, Vt = np.linalg.svd(F)
    return Vt[-1], U[:, -1]


def _inside(e, shape, tol=1e-12):
    h, w = shape
    if abs(e[2]) < tol:
        return False
    x, y = e[0] / e[2], e[1] / e[2]
    return 0 <= x < w and 0 <= y < h


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def rectify(F: np.ndarray, pts1: np.ndarray, pts2: np.ndarray, shape) -> RectifyingPair:
    """Projective rectification of an image pair.

    ``H2`` sends the second epipole to infinity along x; ``H1`` is the matched
    transform whose x-row minimises the squared disparity spread over the
    inlier correspondences. The pair is mirrored when needed so image 1 is the
    left view (``x1 - x2 >= 0``), and the x offset is chosen so rectified
    disparities track the original pixel displacements.
    """
    h, w = shape
    pts1 = np.asarray(pts1, dtype=np.float64)
    pts2 = np.asarray(pts2, dtype=np.float64)
    e1, e2 = epipoles(F)
    if _inside(e1, shape) or _inside(e2, shape):
        raise DegenerateGeometryError("rectification degenerate: epipole inside the image")

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    T = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    Tinv = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    e = T @ e2
    theta = np.arctan2(e[1], e[0])
    if theta > np.pi / 2:
        theta -= np.pi
    elif theta <= -np.pi / 2:
        theta += np.pi
    c, s = np.cos(-theta), np.sin(-theta)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    er = R @ e
    G = np.eye(3)
    G[2, 0] = -er[2] / er[0]
    H2 = Tinv @ G @ R @ T

    e2n = e2 / np.linalg.norm(e2)
    M = _skew(e2n) @ (F / np.linalg.norm(F)) + np.outer(e2n, np.ones(3))
    H0 = H2 @ M
    a = apply_homography(H0, pts1)
    b = apply_homography(H2, pts2)
    coef, *_ = np.linalg.lstsq(np.column_stack([a, np.ones(len(a))]), b[:, 0], rcond=None)
    HA = np.array([[coef[0], coef[1], coef[2]], [0, 1, 0], [0, 0, 1.0]])
    H1 = HA @ H0
    # fix the projective scale so H1 maps to positive w over the image
    if (H1 @ np.array([cx, cy, 1.0]))[2] < 0:
        H1 = -H1
    if (H2 @ np.array([cx, cy, 1.0]))[2] < 0:
        H2 = -H2

    raw = pts1[:, 0] - pts2[:, 0]
    mirrored = bool(np.median(raw) < 0)
    if mirrored:
        flip = np.array([[-1, 0, w - 1], [0, 1, 0], [0, 0, 1.0]])
        H1 = flip @ H1
        H2 = flip @ H2
    rect = apply_homography(H1, pts1)[:, 0] - apply_homography(H2, pts2)[:, 0]
    shift = np.median(np.abs(raw)) - np.median(rect)
    H1 = np.array([[1, 0, shift], [0, 1, 0], [0, 0, 1.0]]) @ H1
    return RectifyingPair(H1=_unit_scale(H1), H2=_unit_scale(H2), shape=(h, w), mirrored=mirrored)


def _unit_scale(H):
    return H / abs(H[2, 2]) if abs(H[2, 2]) > 1e-12 else H / np.linalg.norm(H)


def warp(img: np.ndarray, H: np.ndarray, out_shape) -> np.ndarray:
    """Inverse-map ``img`` through ``H`` with bilinear interpolation.

    Output is float64; pixels whose source lies outside ``img`` are NaN.
    """
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) < 1e-12 * max(1.0, np.abs(H).max() ** 3):
        raise ValueError("homography is singular")
    Hinv = np.linalg.inv(H)
    oh, ow = out_shape
    v, u = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src = np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    sx, sy, sw = Hinv @ src
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = sx / sw
        sy = sy / sw
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    eps = 1e-9
    ok = (sx >= -eps) & (sx <= w - 1 + eps) & (sy >= -eps) & (sy <= h - 1 + eps) & (sw != 0)
    coords = np.stack([np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)])
    coords[~np.isfinite(coords)] = 0.0

    def sample(channel):
        out = ndimage.map_coordinates(channel, coords, order=1, mode="nearest")
        out[~ok] = np.nan
        return out.reshape(oh, ow)

    if img.ndim == 2:
        return sample(img)
    return np.stack([sample(img[..., k]) for k in range(img.shape[2])], axis=-1)

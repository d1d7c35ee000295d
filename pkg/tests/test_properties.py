import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cabbage_pheno import phenometrics as pm
from cabbage_pheno.epipolar import eight_point, sampson_distance
from cabbage_pheno.evaluation import Detection, average_precision, iou, mean_precision
from cabbage_pheno.raster import encode_rle, mask_area, mask_centroid, rasterize
from cabbage_pheno.stereo import PATHS_8, CameraRig, aggregate, aggregate_path, disparity_to_depth, select_disparity

from oracles import sgm_path_naive

masks = st.tuples(st.integers(1, 12), st.integers(1, 12)).flatmap(
    lambda s: arrays(np.bool_, s)
)
nonempty_masks = masks.filter(lambda m: m.any())
small_costs = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.int64, s, elements=st.integers(0, 40))
)
penalties = st.tuples(st.integers(1, 30), st.integers(0, 100)).map(lambda t: (t[0], t[0] + t[1]))
FAST = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@FAST
@given(masks)
def test_rle_roundtrip(m):
    runs = encode_rle(m)
    assert sum(runs) == m.size
    assert np.array_equal(rasterize(runs, m.shape), m)
    assert mask_area(m) == sum(runs[1::2])


@FAST
@given(nonempty_masks)
def test_centroid_in_bbox(m):
    x, y = mask_centroid(m)
    ys, xs = np.nonzero(m)
    assert xs.min() <= x <= xs.max() and ys.min() <= y <= ys.max()


@FAST
@given(small_costs, penalties, st.sampled_from(PATHS_8))
def test_single_path_matches_recurrence(cost, pen, direction):
    acc = np.zeros(cost.shape, np.int64)
    aggregate_path(cost.astype(np.uint8), acc, *direction, *pen)
    assert np.array_equal(acc, sgm_path_naive(cost, *direction, *pen))


@FAST
@given(small_costs, penalties)
def test_path_costs_bounded(cost, pen):
    # each path term lies in [C, C + P2]
    S = aggregate(cost, *pen, paths=8).astype(np.int64)
    assert (S >= 8 * cost).all() and (S <= 8 * (cost + pen[1])).all()


@FAST
@given(small_costs.filter(lambda c: c.shape[2] >= 3), st.floats(1.0, 1.5), st.floats(0.0, 0.5))
def test_uniqueness_monotone(cost, u, du):
    loose = select_disparity(cost, u)
    strict = select_disparity(cost, u + du)
    valid_loose = np.isfinite(loose)
    assert (np.isfinite(strict) <= valid_loose).all()
    d = loose[valid_loose]
    assert ((d > 0) & (d < cost.shape[2] - 1)).all()


@FAST
@given(st.floats(0.6, 300), st.floats(0.6, 300))
def test_depth_monotone(a, b):
    rig = CameraRig(focal_px=1000.0)
    za, zb = disparity_to_depth(a, rig, 1.6), disparity_to_depth(b, rig, 1.6)
    assert (a <= b) == (za >= zb) or a == b


@FAST
@given(st.integers(0, 2**32 - 1))
def test_eight_point_rank2_unit(seed):
    rng = np.random.default_rng(seed)
    p1 = rng.uniform(0, 500, (12, 2))
    p2 = p1 + rng.normal(0, 5, (12, 2))
    F = eight_point(p1, p2)
    assert abs(np.linalg.det(F)) < 1e-9
    assert math.isclose(np.linalg.norm(F), 1.0, rel_tol=1e-12)
    # Sampson distance is symmetric under swapping views with F^T
    assert np.allclose(sampson_distance(F, p1, p2), sampson_distance(F.T, p2, p1))


@FAST
@given(st.floats(0, 100))
def test_volume_scaling(r):
    assert math.isclose(pm.sphere_volume(2 * r), 8 * pm.sphere_volume(r), rel_tol=1e-12, abs_tol=1e-12)


@FAST
@given(st.floats(0.1, 400), st.floats(20, 200), st.floats(500, 3000))
def test_fixed_point(r_px, z_top, f):
    rig = CameraRig(focal_px=f)
    r = pm.head_radius_cm(r_px, z_top, rig)
    assert math.isclose(r, pm.px_to_cm(r_px, z_top + r, rig), rel_tol=0, abs_tol=1e-9)


@FAST
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=3))
def test_leaf_length_triangle(pts):
    a, b, c = pts
    assert pm.leaf_length(a, c) <= pm.leaf_length(a, b) + pm.leaf_length(b, c) + 1e-9


@FAST
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_assignment_partition(n_plants, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_plants + 1, (12, 12))  # label 0 is background
    plants = {k: labels == k for k in range(1, n_plants + 1)}
    leaves = {i: rng.random((12, 12)) < 0.3 for i in range(6)}
    owner = pm.assign_leaves(plants, leaves)
    for leaf_id, pid in owner.items():
        frac = (leaves[leaf_id] & plants[pid]).sum() / leaves[leaf_id].sum()
        assert frac > 0.5
    for leaf_id in leaves:
        hits = [p for p, m in plants.items() if (leaves[leaf_id] & m).sum() * 2 > leaves[leaf_id].sum()]
        assert len(hits) <= 1
        assert (leaf_id in owner) == bool(hits)


@FAST
@given(st.integers(2, 30), st.integers(0, 10), st.floats(40, 90))
def test_volume_monotone_in_mask(r, grow, z):
    rig = CameraRig(focal_px=1000.0)
    ys, xs = np.mgrid[0:80, 0:80]
    small = (xs - 40) ** 2 + (ys - 40) ** 2 <= r * r
    big = small | ((xs - 40) ** 2 + (ys - 40) ** 2 <= (r + grow) ** 2)
    depth = np.full(small.shape, z)
    assert pm.head_geometry(big, depth, rig).volume_cm3 >= pm.head_geometry(small, depth, rig).volume_cm3


@FAST
@given(nonempty_masks, st.data())
def test_iou_symmetric(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


@FAST
@given(st.integers(0, 2**32 - 1))
def test_ap_range_and_threshold_monotone(seed):
    rng = np.random.default_rng(seed)
    truths = [rng.random((8, 8)) < 0.4 for _ in range(3)]
    dets = [Detection(rng.random((8, 8)) < 0.4, float(rng.random())) for _ in range(4)]
    dets += [Detection(t, float(rng.random())) for t in truths[:2]]
    aps = [average_precision(dets, truths, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(0.0 <= a <= 1.0 for a in aps)
    assert all(x >= y - 1e-12 for x, y in zip(aps, aps[1:]))


@FAST
@given(
    st.lists(st.tuples(st.floats(0.1, 100), st.floats(0.1, 100)), min_size=1, max_size=20),
    st.floats(0.01, 100),
)
def test_mean_precision_scale_invariant(pairs, c):
    det, tru = map(np.array, zip(*pairs))
    assert math.isclose(mean_precision(c * det, c * tru), mean_precision(det, tru), rel_tol=1e-9, abs_tol=1e-9)

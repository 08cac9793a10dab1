import itertools
import math

import numpy as np
import pytest

from desktamp.errors import DegenerateInput, NoPlaneFound
from desktamp.geom import (
    ConvexFootprint,
    DiscSet,
    NNIndex,
    PointCloud,
    Pose2,
    chebyshev_center,
    convex_hull_2d,
    disc_decompose,
    disc_set_distance,
    min_area_obb,
    point_in_convex,
    ransac_plane,
    ray_cast,
    wrap_angle,
)
from conftest import box, make_scene, ngon

from desktamp.scene import SceneObject


# --- oracles ---

def hull_brute_force(points):
    """O(n^3): a point is a hull vertex iff it lies on a supporting line with
    all other points strictly to one side (collinear mid-points excluded)."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    n = len(pts)
    keep = []
    for i, j in itertools.permutations(range(n), 2):
        d = pts[j] - pts[i]
        rel = pts - pts[i]
        cross = d[0] * rel[:, 1] - d[1] * rel[:, 0]
        others = np.delete(cross, [i, j])
        if np.all(others > 1e-9):
            keep.append(i)
    verts = pts[sorted(set(keep))]
    centroid = verts.mean(axis=0)
    order = np.argsort(np.arctan2(verts[:, 1] - centroid[1], verts[:, 0] - centroid[0]))
    return verts[order]


def nn_linear_scan(points, q):
    d = np.linalg.norm(points - q, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def canonical(polygon):
    """Rotate vertex order to start at the lexicographically smallest vertex."""
    arr = np.asarray(polygon)
    start = np.lexsort((arr[:, 1], arr[:, 0]))[0]
    return np.roll(arr, -start, axis=0)


# --- wrap / pose ---

def test_wrap_angle_range():
    for a in [-7.0, -math.pi, -0.5, 0.0, 1.0, math.pi, 9.0]:
        w = float(wrap_angle(a))
        assert -math.pi < w <= math.pi
        assert abs(math.remainder(w - a, 2 * math.pi)) < 1e-12


def test_pose_compose_inverse():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = Pose2(*rng.normal(size=3))
        b = Pose2(*rng.normal(size=3))
        pts = rng.normal(size=(5, 2))
        via_compose = a.compose(b).transform(pts)
        nested = a.transform(b.transform(pts))
        assert np.allclose(via_compose, nested, atol=1e-12)
        ident = a.compose(a.inverse())
        assert abs(ident.x) < 1e-12 and abs(ident.y) < 1e-12 and abs(ident.yaw) < 1e-12


# --- convex hull ---

def test_hull_drops_interior_point():
    pts = [(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)]
    hull = convex_hull_2d(pts)
    assert len(hull) == 4
    expected = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert np.allclose(canonical(hull), canonical(expected))


def test_hull_collinear_within_tolerance():
    with pytest.raises(DegenerateInput):
        convex_hull_2d([(0, 0), (2, 0), (1, 1e-12)])


def test_hull_matches_brute_force_on_seeded_sets():
    rng = np.random.default_rng(42)
    for trial in range(50):
        n = int(rng.integers(10, 200))
        r = np.sqrt(rng.random(n))
        th = rng.random(n) * 2 * math.pi
        pts = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        hull = convex_hull_2d(pts)
        oracle = hull_brute_force(pts)
        assert len(hull) == len(oracle), f"trial {trial}"
        assert np.allclose(canonical(hull), canonical(oracle), atol=1e-12)


def test_hull_contains_all_inputs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        pts = rng.normal(size=(60, 2))
        hull = convex_hull_2d(pts)
        for p in pts:
            assert point_in_convex(hull, p, margin=1e-9)


# --- ransac plane ---

def _cloud(points):
    pts = np.asarray(points, dtype=float)
    return PointCloud(pts, np.zeros((len(pts), 2), dtype=int))


def test_ransac_exact_plane_with_outliers():
    rng = np.random.default_rng(0)
    inliers = np.column_stack([rng.random(180) * 0.5, rng.random(180) * 0.5,
                               np.full(180, 0.40)])
    outliers = np.column_stack([rng.random(20) * 0.5, rng.random(20) * 0.5,
                                np.full(20, 0.9)])
    plane, idx = ransac_plane(_cloud(np.vstack([inliers, outliers])), seed=5)
    assert np.allclose(plane.normal, [0, 0, 1], atol=1e-9)
    assert abs(plane.offset - (-0.40)) < 1e-9
    assert len(idx) >= 180


def test_ransac_noisy_plane_vs_labeled_least_squares():
    rng = np.random.default_rng(1)
    n_in, n_out = 700, 300
    xy = rng.random((n_in, 2)) * 0.6
    z = 0.40 + rng.normal(0, 0.002, n_in)
    inliers = np.column_stack([xy, z])
    outliers = rng.random((n_out, 3)) * np.array([0.6, 0.6, 0.5])
    pts = np.vstack([inliers, outliers])
    plane, _ = ransac_plane(_cloud(pts), iterations=512, inlier_tol=0.005,
                            min_inlier_frac=0.3, seed=9)
    angle = math.degrees(math.acos(min(1.0, float(abs(plane.normal[2])))))
    assert angle < 1.0
    # compare against total least squares on the ground-truth inlier labels
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid)
    ref_normal = vt[-1] if vt[-1][2] > 0 else -vt[-1]
    ref_offset = -float(ref_normal @ centroid)
    assert abs(plane.offset - ref_offset) < 0.004


def test_ransac_random_cube_no_plane():
    rng = np.random.default_rng(2)
    pts = rng.random((100, 3))
    # brute-force check: no 3-point plane with tight tolerance reaches 60%
    with pytest.raises(NoPlaneFound):
        ransac_plane(_cloud(pts), iterations=128, inlier_tol=0.003,
                     min_inlier_frac=0.6, seed=3)


def test_ransac_deterministic():
    rng = np.random.default_rng(4)
    pts = np.column_stack([rng.random(120), rng.random(120), np.zeros(120)])
    pts[::7, 2] = 0.5
    a_plane, a_idx = ransac_plane(_cloud(pts), seed=11)
    b_plane, b_idx = ransac_plane(_cloud(pts), seed=11)
    assert np.array_equal(a_idx, b_idx)
    assert np.array_equal(a_plane.normal, b_plane.normal)
    assert a_plane.offset == b_plane.offset


# --- disc decomposition ---

def sample_inside(footprint, n, seed):
    """Seeded interior samples by rejection from the bounding box."""
    rng = np.random.default_rng(seed)
    verts = footprint.vertices
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    out = []
    while len(out) < n:
        cand = lo + rng.random((n, 2)) * (hi - lo)
        for p in cand:
            if point_in_convex(verts, p) and len(out) < n:
                out.append(p)
    return np.array(out)


def covered(discs, points):
    d = np.linalg.norm(points[:, None, :] - discs.centers[None, :, :], axis=2)
    return np.all((d <= discs.radii[None, :] + 1e-9).any(axis=1))


def test_disc_decompose_round_footprint_single_disc():
    fp = ConvexFootprint(ngon(1.0, 32), height=0.1)
    discs = disc_decompose(fp, 0.5)
    assert len(discs.centers) == 1
    assert discs.radii[0] >= 1.0 - 1e-9
    assert np.allclose(discs.centers[0], [0, 0], atol=1e-9)


def test_disc_decompose_thin_rectangle():
    fp = ConvexFootprint(box(0.4, 0.1), height=0.05)
    discs = disc_decompose(fp, 0.05)
    assert len(discs.centers) >= 4
    _, inradius = chebyshev_center(fp.vertices)
    assert np.all(discs.radii <= inradius + 0.05 + 1e-9)
    pts = sample_inside(fp, 10_000, seed=21)
    assert covered(discs, pts)


def test_disc_decompose_sliver_triangle():
    fp = ConvexFootprint(np.array([[0.0, 0.0], [0.3, 0.004], [0.0, 0.008]]), height=0.02)
    discs = disc_decompose(fp, 0.01)
    assert np.all(np.isfinite(discs.radii))
    pts = sample_inside(fp, 10_000, seed=22)
    assert covered(discs, pts)


def test_disc_cover_property_random_footprints():
    rng = np.random.default_rng(77)
    for trial in range(10):
        pts = rng.normal(size=(12, 2)) * rng.uniform(0.02, 0.2)
        hull = convex_hull_2d(pts)
        fp = ConvexFootprint(hull, height=0.05)
        discs = disc_decompose(fp, float(rng.uniform(0.005, 0.05)))
        samples = sample_inside(fp, 10_000, seed=trial)
        assert covered(discs, samples), f"trial {trial}"


# --- disc set distance ---

def test_disc_distance_two_unit_discs():
    a = DiscSet([[0.0, 0.0]], [1.0])
    b = DiscSet([[3.0, 0.0]], [1.0])
    res = disc_set_distance(a, b, temperature=0.01)
    assert abs(res.hard - 1.0) < 1e-12
    assert np.allclose(res.grad_soft[:2], [-1.0, 0.0], atol=1e-9)
    assert abs(res.grad_soft[2]) < 1e-9


def test_disc_distance_identical_sets_negative():
    a = DiscSet([[0.1, -0.2]], [0.05])
    res = disc_set_distance(a, a)
    assert abs(res.hard - (-0.10)) < 1e-12


def test_disc_distance_symmetry_and_translation():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = DiscSet(rng.normal(size=(5, 2)), rng.uniform(0.01, 0.3, 5))
        b = DiscSet(rng.normal(size=(7, 2)), rng.uniform(0.01, 0.3, 7))
        ab = disc_set_distance(a, b)
        ba = disc_set_distance(b, a)
        assert abs(ab.hard - ba.hard) < 1e-12
        assert abs(ab.soft - ba.soft) < 1e-12
        t = rng.normal(size=2)
        a2 = DiscSet(a.centers + t, a.radii)
        b2 = DiscSet(b.centers + t, b.radii)
        moved = disc_set_distance(a2, b2)
        assert abs(moved.hard - ab.hard) < 1e-12
        assert abs(moved.soft - ab.soft) < 1e-12


def test_disc_distance_softmin_below_hard_and_temperature_limit():
    rng = np.random.default_rng(6)
    a = DiscSet(rng.normal(size=(4, 2)), rng.uniform(0.05, 0.2, 4))
    b = DiscSet(rng.normal(size=(6, 2)) + 1.5, rng.uniform(0.05, 0.2, 6))
    gaps = []
    for temp in (1e-1, 1e-2, 1e-3):
        res = disc_set_distance(a, b, temperature=temp)
        assert res.soft <= res.hard + 1e-12
        gaps.append(res.hard - res.soft)
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-2


def test_disc_distance_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    h = 1e-6
    for trial in range(25):
        a = DiscSet(rng.normal(size=(5, 2)) * 0.3, rng.uniform(0.02, 0.1, 5))
        b = DiscSet(rng.normal(size=(7, 2)) * 0.3 + np.array([0.8, 0.1]),
                    rng.uniform(0.02, 0.1, 7))
        pose = Pose2(*rng.normal(size=3))
        res = disc_set_distance(a, b, pose_a=pose, temperature=0.01)
        fd = np.zeros(3)
        for k in range(3):
            dp, dm = np.zeros(3), np.zeros(3)
            dp[k], dm[k] = h, -h
            arr = pose.as_array()
            up = disc_set_distance(a, b, pose_a=Pose2(*(arr + dp)), temperature=0.01)
            dn = disc_set_distance(a, b, pose_a=Pose2(*(arr + dm)), temperature=0.01)
            fd[k] = (up.soft - dn.soft) / (2 * h)
        denom = max(np.linalg.norm(fd), 1e-9)
        assert np.linalg.norm(res.grad_soft - fd) / denom <= 1e-4, f"trial {trial}"


# --- ray casting ---

def test_ray_straight_down_hits_box_top():
    scene = make_scene([SceneObject("b", box(0.1, 0.1), 0.1, Pose2(0.4, 0.0, 0.0))])
    hit = ray_cast(scene, [0.4, 0.0, 0.8], [0.0, 0.0, -1.0])
    assert hit is not None
    dist, ident = hit
    assert ident == 0
    assert abs(dist - 0.7) < 1e-12


def test_ray_misses_everything():
    scene = make_scene([SceneObject("b", box(0.1, 0.1), 0.1, Pose2(0.4, 0.0, 0.0))])
    assert ray_cast(scene, [0.0, 0.0, 0.5], [0.0, 1.0, 0.0]) is None


def test_ray_oblique_vs_cylinder_closed_form():
    radius, height = 0.05, 0.12
    scene = make_scene(
        [SceneObject("cyl", ngon(radius, 64), height, Pose2(0.40, 0.0, 0.0))]
    )
    origin = np.array([0.10, 0.02, 0.18])
    target = np.array([0.40, 0.0, 0.06])
    d = target - origin
    d = d / np.linalg.norm(d)
    hit = ray_cast(scene, origin, d)
    assert hit is not None
    # closed-form infinite cylinder |p_xy - c| = r, clipped to the z-slab
    oc = origin[:2] - np.array([0.40, 0.0])
    a = d[0] ** 2 + d[1] ** 2
    b = 2 * (oc[0] * d[0] + oc[1] * d[1])
    c = oc @ oc - radius**2
    t_cyl = (-b - math.sqrt(b * b - 4 * a * c)) / (2 * a)
    z_hit = origin[2] + t_cyl * d[2]
    assert 0 < z_hit < height
    assert abs(hit[0] - t_cyl) < 1e-3


def test_ray_tie_breaks_to_lower_object_id():
    objs = [
        SceneObject("a", box(0.1, 0.1), 0.1, Pose2(0.40, 0.0, 0.0)),
        SceneObject("b", box(0.1, 0.1), 0.1, Pose2(0.40, 0.0, 0.0)),
    ]
    scene = make_scene(objs)
    _, ident = ray_cast(scene, [0.4, 0.0, 0.9], [0.0, 0.0, -1.0])
    assert ident == 0


def test_ray_hits_table():
    scene = make_scene([SceneObject("b", box(0.05, 0.05), 0.1, Pose2(0.4, 0.2, 0.0))])
    dist, ident = ray_cast(scene, [0.3, -0.1, 0.6], [0.0, 0.0, -1.0])
    assert ident == "table"
    assert abs(dist - 0.6) < 1e-12


# --- min-area OBB ---

def test_min_area_obb_rotated_rectangle():
    rect = box(0.3, 0.1)
    pose = Pose2(0.2, -0.1, 0.7)
    obb = min_area_obb(pose.transform(rect))
    assert abs(obb.area() - 0.03) < 1e-9
    assert np.allclose(sorted(obb.half_extents), [0.05, 0.15], atol=1e-9)
    assert np.allclose(obb.center, [0.2, -0.1], atol=1e-9)


def test_min_area_obb_never_beaten_by_angle_sweep():
    rng = np.random.default_rng(12)
    for _ in range(10):
        pts = rng.normal(size=(20, 2))
        obb = min_area_obb(pts)
        for ang in np.linspace(0, math.pi / 2, 91):
            c, s = math.cos(ang), math.sin(ang)
            rot = pts @ np.array([[c, s], [-s, c]]).T
            extent = rot.max(axis=0) - rot.min(axis=0)
            assert obb.area() <= extent[0] * extent[1] + 1e-9


# --- nearest neighbor ---

def test_nn_single_point():
    idx = NNIndex([[1.0, 2.0]])
    i, d = idx.query([4.0, 6.0])
    assert i == 0 and abs(d - 5.0) < 1e-12


def test_nn_matches_linear_scan_seeded():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(1000, 2))
    idx = NNIndex(pts)
    for _ in range(100):
        q = rng.normal(size=2) * 1.5
        i, d = idx.query(q)
        oi, od = nn_linear_scan(pts, q)
        assert i == oi
        assert d == od


def test_nn_duplicates_lowest_id():
    pts = np.array([[1.0, 1.0], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
    idx = NNIndex(pts)
    i, _ = idx.query([0.5, 0.5])
    assert i == 1

import math

import numpy as np
import pytest

from desktamp.errors import DegenerateInput, EmptyView, NoSurfacePoints, TooFewPoints
from desktamp.geom import DiscSet, Pose2, point_in_convex, ray_cast
from desktamp.motion import ArmModel
from desktamp.percept import (
    BeliefObject,
    CameraModel,
    GripperSpec,
    Observation,
    RansacConfig,
    assign_grasps,
    build_belief,
    camera_attached,
    camera_look_at,
    detect_table,
    localize_wipe_region,
    reconstruct_objects,
    render_observation,
    sample_grasps,
    unproject,
)
from desktamp.scene import MarkedRegion, SceneObject
from conftest import box, make_scene, ngon


def identity_camera(width=8, height=8):
    return CameraModel(10.0, 10.0, (width - 1) / 2, (height - 1) / 2,
                       width, height, np.eye(4))


# --- rendering ---

def test_render_noiseless_depth_matches_ray_cast(simple_scene):
    obs = render_observation(simple_scene, simple_scene.camera, (0.0, 0), seed=0)
    cam = simple_scene.camera
    mask = obs.masks[0]
    rows, cols = np.nonzero(mask)
    assert len(rows) > 20
    for r, c in list(zip(rows, cols))[::7]:
        v = np.array([(c - cam.cx) / cam.fx, (r - cam.cy) / cam.fy, 1.0])
        scale = np.linalg.norm(v)
        d_world = cam.rotation @ (v / scale)
        dist, ident = ray_cast(simple_scene, cam.position, d_world)
        assert ident == 0
        assert abs(obs.depth[r, c] - dist / scale) < 1e-12


def test_render_depth_noise_statistics(simple_scene):
    clean = render_observation(simple_scene, simple_scene.camera, (0.0, 0), seed=3)
    noisy = render_observation(simple_scene, simple_scene.camera, (0.002, 0), seed=3)
    finite = np.isfinite(clean.depth)
    assert finite.sum() >= 10_000
    err = (noisy.depth - clean.depth)[finite]
    assert abs(err.mean()) < 0.0002
    assert 0.8 * 0.002 < err.std() < 1.2 * 0.002


def test_render_empty_view():
    scene = make_scene(
        [SceneObject("b", box(0.05, 0.05), 0.05, Pose2(0.4, 0.0, 0.0))],
        camera=camera_look_at([0.3, 0.0, 0.5], [0.3, 0.0, 5.0], fx=100.0,
                              width=32, height=32),
    )
    with pytest.raises(EmptyView):
        render_observation(scene, scene.camera, (0.0, 0), seed=0)


def test_render_deterministic(simple_scene):
    a = render_observation(simple_scene, simple_scene.camera, (0.002, 1), seed=9)
    b = render_observation(simple_scene, simple_scene.camera, (0.002, 1), seed=9)
    assert np.array_equal(a.depth, b.depth, equal_nan=True)
    for k in a.masks:
        assert np.array_equal(a.masks[k], b.masks[k])


def test_mask_erosion_shrinks(simple_scene):
    clean = render_observation(simple_scene, simple_scene.camera, (0.0, 0), seed=0)
    eroded = render_observation(simple_scene, simple_scene.camera, (0.0, 2), seed=0)
    for k in clean.masks:
        assert eroded.masks[k].sum() < clean.masks[k].sum()
        assert np.all(clean.masks[k][eroded.masks[k]])


# --- unprojection ---

def test_unproject_principal_point():
    cam = identity_camera()
    depth = np.full((8, 8), np.nan)
    r, c = 3, 3  # integer pixel nearest the principal point (3.5, 3.5)
    cam = CameraModel(10.0, 10.0, 3.0, 3.0, 8, 8, np.eye(4))
    depth[r, c] = 1.0
    cloud = unproject(Observation(depth, {}, {}), cam)
    assert len(cloud) == 1
    assert np.allclose(cloud.points[0], [0.0, 0.0, 1.0], atol=1e-12)
    assert tuple(cloud.source_pixel[0]) == (3, 3)


def test_unproject_roundtrip_on_surfaces(simple_scene):
    cam = simple_scene.camera
    obs = render_observation(simple_scene, cam, (0.0, 0), seed=0)
    cloud = unproject(obs, cam)
    dirs = cloud.points - cam.position
    dists = np.linalg.norm(dirs, axis=1)
    dirs /= dists[:, None]
    for i in range(0, len(cloud), 211):
        hit = ray_cast(simple_scene, cam.position, dirs[i])
        assert hit is not None
        assert abs(hit[0] - dists[i]) < 1e-6


def test_unproject_all_nan():
    cam = identity_camera()
    cloud = unproject(Observation(np.full((8, 8), np.nan), {}, {}), cam)
    assert len(cloud) == 0


# --- table detection ---

def test_detect_table_with_boxes(simple_scene):
    cam = simple_scene.camera
    obs = render_observation(simple_scene, cam, (0.0, 0), seed=1)
    cloud = unproject(obs, cam)
    det = detect_table(cloud, RansacConfig(seed=2))
    # plane z = 0: offset ~ 0, normal ~ +z
    assert abs(det.plane.offset) <= 0.002
    assert det.plane.normal[2] > 0.999
    table_mask = np.ones(len(cloud), dtype=bool)
    for m in obs.masks.values():
        table_mask &= ~m[cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]]
    table_idx = np.flatnonzero(table_mask)
    hit = np.intersect1d(table_idx, det.inliers)
    assert len(hit) / len(table_idx) >= 0.95


def test_detect_table_object_top_hazard():
    # a single huge flat box dominates the view: its top becomes the "table"
    scene = make_scene(
        [SceneObject("slab", box(0.5, 0.5), 0.08, Pose2(0.38, 0.0, 0.0))],
        camera=camera_look_at([0.38, 0.0, 0.6], [0.381, 0.0, 0.0], fx=60.0,
                              width=64, height=64),
    )
    obs = render_observation(scene, scene.camera, (0.0, 0), seed=0)
    cloud = unproject(obs, cam := scene.camera)
    det = detect_table(cloud, RansacConfig(min_inlier_frac=0.3, seed=1))
    assert abs(-det.plane.offset / det.plane.normal[2] - 0.08) < 0.002


def test_detect_table_empty_cloud():
    cloud = unproject(Observation(np.full((4, 4), np.nan), {}, {}), identity_camera(4, 4))
    with pytest.raises(DegenerateInput):
        detect_table(cloud)


# --- object reconstruction ---

def _perceive(scene, seed=0, noise=(0.0, 0)):
    cam = scene.camera
    obs = render_observation(scene, cam, noise, seed=seed)
    cloud = unproject(obs, cam)
    det = detect_table(cloud, RansacConfig(seed=seed))
    return obs, cloud, det


def test_reconstruct_hull_contains_masked_points(simple_scene):
    obs, cloud, det = _perceive(simple_scene)
    hulls = reconstruct_objects(cloud, obs, det.plane)
    for obj_id, hull in hulls.items():
        mask = obs.masks[obj_id]
        sel = mask[cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]]
        for p in cloud.points[sel][:, :2]:
            assert point_in_convex(hull.vertices, p, margin=1e-9)
        true_verts = simple_scene.objects[obj_id].world_vertices()
        # over-approximation of the visible region: hull area is at least half
        # the true footprint (a single view cannot see every face)
        from desktamp.geom import polygon_area
        assert polygon_area(hull.vertices) > 0.3 * polygon_area(true_verts)


def test_reconstruct_stacked_object_z_base():
    lower = SceneObject("crate", box(0.12, 0.12), 0.06, Pose2(0.38, 0.0, 0.0))
    upper = SceneObject("cube", box(0.04, 0.04), 0.04, Pose2(0.38, 0.0, 0.3),
                        z_base=0.06)
    scene = make_scene([lower, upper],
                       camera=camera_look_at([0.1, 0.05, 0.75], [0.38, 0.0, 0.0],
                                             fx=150.0, width=140, height=120))
    obs, cloud, det = _perceive(scene)
    hulls = reconstruct_objects(cloud, obs, det.plane)
    assert abs(hulls[1].z_base - 0.06) < 0.003


def test_reconstruct_too_few_points(simple_scene):
    obs, cloud, det = _perceive(simple_scene)
    obs.masks[0] = np.zeros_like(obs.masks[0])
    obs.masks[0][0, 0] = True
    obs.masks[0][0, 1] = True
    with pytest.raises(TooFewPoints) as exc:
        reconstruct_objects(cloud, obs, det.plane)
    assert exc.value.object_id == 0


# --- grasp sampling / assignment ---

def _belief_obj(obj_id, verts, height=0.05, z_base=0.0):
    from desktamp.geom import ConvexFootprint, disc_decompose

    hull = ConvexFootprint(np.asarray(verts, dtype=float), height, z_base)
    return BeliefObject(obj_id, f"obj{obj_id}", hull, disc_decompose(hull, 0.01))


def test_sample_grasps_isolated_square():
    sq = _belief_obj(0, box(0.04, 0.04) + np.array([0.4, 0.1]))
    cands = sample_grasps({0: sq}, GripperSpec(max_width=0.10, clearance=0.01))
    assert len(cands) >= 2
    yaws = sorted({round(c.approach_pose.yaw % (math.pi), 6) for c in cands})
    assert any(abs(y) < 1e-6 for y in yaws)
    assert any(abs(y - math.pi / 2) < 1e-6 for y in yaws)
    for c in cands:
        assert abs(c.width - 0.05) < 1e-9  # caliper 0.04 + clearance 0.01
        assert 0 <= c.score <= 1


def test_sample_grasps_object_too_wide():
    wide = _belief_obj(0, box(0.12, 0.12))
    cands = sample_grasps({0: wide}, GripperSpec(max_width=0.10))
    assert cands == []


def test_sample_grasps_walled_in_target():
    # U-shaped wall of slabs hugging the target: every finger slot collides
    target = _belief_obj(0, box(0.04, 0.04) + np.array([0.4, 0.0]))
    walls = [
        _belief_obj(1, box(0.012, 0.09) + np.array([0.365, 0.0])),
        _belief_obj(2, box(0.012, 0.09) + np.array([0.435, 0.0])),
        _belief_obj(3, box(0.09, 0.012) + np.array([0.4, -0.035])),
        _belief_obj(4, box(0.09, 0.012) + np.array([0.4, 0.035])),
    ]
    objs = {o.object_id: o for o in [target] + walls}
    cands = sample_grasps(objs, GripperSpec(), check_collisions=True)
    assert [c for c in cands if c.object_id == 0] == []
    # without collision rejection the width-feasible candidates exist
    free = sample_grasps({0: target}, GripperSpec(), check_collisions=False)
    assert len(free) >= 2


def _dense_cloud(center, w=0.04, n=9):
    xs = np.linspace(-w / 2, w / 2, n)
    gx, gy = np.meshgrid(xs, xs)
    return np.stack([gx.ravel(), gy.ravel()], axis=1) + np.asarray(center)


def test_assign_grasps_relabels_and_discards():
    a = _belief_obj(0, box(0.04, 0.04) + np.array([0.3, 0.0]))
    cands = sample_grasps({0: a}, GripperSpec())
    clouds = {0: _dense_cloud([0.3, 0.0]), 1: _dense_cloud([0.5, 0.0])}
    kept = assign_grasps(cands, clouds, threshold=0.02)
    assert kept and all(c.object_id == 0 for c in kept)
    far = [type(c)(c.object_id, c.approach_pose, c.width, c.score,
                   np.array([0.9, 0.9])) for c in cands]
    assert assign_grasps(far, clouds, threshold=0.02) == []


def test_assign_grasps_tie_goes_to_lower_id():
    cand = sample_grasps({0: _belief_obj(0, box(0.04, 0.04))}, GripperSpec())[:1]
    cand[0].contact_point = np.array([0.5, 0.0])
    clouds = {3: np.array([[0.4, 0.0]]), 7: np.array([[0.6, 0.0]])}
    kept = assign_grasps(cand, clouds, threshold=0.2)
    assert kept[0].object_id == 3


def test_assign_grasps_idempotent():
    a = _belief_obj(0, box(0.04, 0.04) + np.array([0.3, 0.0]))
    cands = sample_grasps({0: a}, GripperSpec())
    clouds = {0: box(0.04, 0.04) + np.array([0.3, 0.0])}
    once = assign_grasps(cands, clouds)
    twice = assign_grasps(once, clouds)
    assert [(c.object_id, c.width) for c in once] == [(c.object_id, c.width) for c in twice]


def test_assign_grasps_matches_linear_scan_oracle():
    rng = np.random.default_rng(31)
    clouds = {i: rng.normal(size=(40, 2)) * 0.05 + rng.normal(size=2) * 0.3
              for i in range(4)}
    base = _belief_obj(0, box(0.04, 0.04))
    template = sample_grasps({0: base}, GripperSpec())[0]
    cands = []
    for _ in range(50):
        c = type(template)(0, template.approach_pose, template.width,
                           template.score, rng.normal(size=2) * 0.4)
        cands.append(c)
    kept = assign_grasps(cands, clouds, threshold=0.05)
    # oracle: flat linear scan over every (object, point) pair
    stacked = np.vstack([clouds[i] for i in sorted(clouds)])
    owner = np.concatenate([np.full(len(clouds[i]), i) for i in sorted(clouds)])
    survivors = []
    for c in cands:
        d = np.linalg.norm(stacked - c.contact_point, axis=1)
        j = int(np.argmin(d))
        if d[j] <= 0.05:
            survivors.append(int(owner[j]))
    assert [c.object_id for c in kept] == survivors


# --- full belief + grasp collision invariant ---

def test_build_belief_grasps_collision_free(simple_scene):
    from desktamp.geom import disc_set_distance

    obs, cloud, belief = build_belief(simple_scene, simple_scene.camera,
                                      GripperSpec(), seed=4)
    assert set(belief.objects) == {0, 1}
    gripper = GripperSpec()
    for obj in belief.objects.values():
        for cand in obj.grasps:
            fingers = cand.finger_discs(gripper)
            for other_id, other in belief.objects.items():
                if other_id == cand.object_id:
                    continue
                t = belief.objects[cand.object_id].hull
                if min(t.z_top, other.hull.z_top) - max(t.z_base, other.hull.z_base) <= 1e-9:
                    continue
                assert disc_set_distance(fingers, other.discs_world).hard >= 0


# --- observation container ---

def test_observation_container_roundtrip(simple_scene):
    cam = simple_scene.camera
    obs = render_observation(simple_scene, cam, (0.001, 0), seed=5)
    blob = obs.to_bytes(cam)
    back, cam2 = Observation.from_bytes(blob)
    assert np.array_equal(back.depth, obs.depth.astype(np.float32).astype(float),
                          equal_nan=True)
    for k in obs.masks:
        assert np.array_equal(back.masks[k], obs.masks[k])
    assert back.labels == obs.labels
    assert np.allclose(cam2.pose, cam.pose)
    # serialize -> parse -> serialize is byte-identical
    assert Observation.from_bytes(blob)[0].to_bytes(cam2) == blob


# --- wipe region localization ---

def _board_scene():
    board = SceneObject("board", box(0.20, 0.14), 0.01, Pose2(0.38, 0.0, 0.0),
                        marked_region=MarkedRegion([0.02, 0.01], [0.05, 0.03]))
    scene = make_scene([board],
                       camera=camera_look_at([0.2, 0.0, 0.7], [0.38, 0.0, 0.0],
                                             fx=160.0, width=160, height=120))
    return scene


def test_localize_wipe_region_contains_patch():
    scene = _board_scene()
    obs, cloud, det = _perceive(scene)
    board = scene.objects[0]
    region = board.marked_region
    # project the true patch corners into the image to build the query bbox
    cam = scene.camera
    corners_local = np.array([
        [region.center[0] - region.half_extents[0], region.center[1] - region.half_extents[1]],
        [region.center[0] + region.half_extents[0], region.center[1] + region.half_extents[1]],
    ])
    world = board.pose.transform(corners_local)
    pts3 = np.column_stack([world, np.full(2, board.z_top)])
    rel = (pts3 - cam.position) @ cam.rotation
    u = rel[:, 0] / rel[:, 2] * cam.fx + cam.cx
    v = rel[:, 1] / rel[:, 2] * cam.fy + cam.cy
    bbox = (int(v.min() / 120 * 1000), int(u.min() / 160 * 1000),
            int(math.ceil(v.max() / 120 * 1000)), int(math.ceil(u.max() / 160 * 1000)))
    obb = localize_wipe_region(obs, 0, cloud, bbox)
    patch_corners = board.pose.transform(np.array([
        region.center + region.half_extents * np.array([sx, sy])
        for sx in (-1, 1) for sy in (-1, 1)
    ]))
    assert np.all(obb.contains(patch_corners, margin=-0.01))
    patch_area = 4 * region.half_extents[0] * region.half_extents[1]
    assert obb.area() <= 2.0 * patch_area


def test_localize_wipe_region_off_surface():
    scene = _board_scene()
    obs, cloud, det = _perceive(scene)
    with pytest.raises(NoSurfacePoints):
        localize_wipe_region(obs, 0, cloud, (0, 0, 20, 20))


def test_localize_wipe_region_full_surface():
    scene = _board_scene()
    obs, cloud, det = _perceive(scene)
    obb = localize_wipe_region(obs, 0, cloud, (0, 0, 1000, 1000))
    top = scene.top_obb("board")
    assert np.all(np.abs(np.sort(obb.half_extents) - np.sort(top.half_extents)) < 0.02)


# --- attached camera composes FK ---

def test_camera_attached_pose():
    arm = ArmModel()
    t_cam_ee = np.eye(4)
    t_cam_ee[:3, :3] = np.array([[0, -1, 0], [-1, 0, 0], [0, 0, -1.0]])
    t_cam_ee[:3, 3] = [0, 0, 0.6]
    q0 = np.array([0.3, -0.2, 0.1])
    cam = camera_attached(arm, q0, t_cam_ee, fx=100.0, width=64, height=64, ee_z=0.2)
    from desktamp.motion import fk

    ee = fk(arm, q0)
    assert np.allclose(cam.position, [ee.x, ee.y, 0.8], atol=1e-12)
    # camera looks straight down
    assert np.allclose(cam.rotation @ [0, 0, 1], [0, 0, -1], atol=1e-12)
    assert np.array_equal(cam.capture_q, q0)

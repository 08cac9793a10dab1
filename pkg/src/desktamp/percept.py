"""Synthetic perception: render an observation from the ground-truth scene,
then reconstruct an object-centric belief (hulls, table, grasp candidates)
the way the real vision stack would from sensors.

The renderer stands in for learned stereo depth + segmentation; everything
downstream of the depth map follows the production recipe: unproject,
RANSAC table fit, per-mask hull reconstruction, grasp sampling/assignment.
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, EmptyView, NoSurfacePoints, TooFewPoints
from .geom import (
    OBB2,
    ConvexFootprint,
    DiscSet,
    NNIndex,
    Plane3,
    PointCloud,
    Pose2,
    caliper_extent,
    convex_hull_2d,
    disc_decompose,
    disc_set_distance,
    min_area_obb,
    polygon_centroid,
    ransac_plane,
    ray_cast_batch,
    wrap_angle,
)
from .motion import fk
from .rng import generator

OBSERVATION_MAGIC = b"DTOB"
OBSERVATION_VERSION = 1


@dataclass
class CameraModel:
    """Pinhole camera; ``pose`` maps camera-frame points into the world."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray
    capture_q: np.ndarray = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise DegenerateInput("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DegenerateInput("principal point outside image")
        if self.capture_q is None:
            self.capture_q = np.zeros(3)
        else:
            self.capture_q = np.asarray(self.capture_q, dtype=float)

    @property
    def position(self):
        return self.pose[:3, 3]

    @property
    def rotation(self):
        return self.pose[:3, :3]

    def record(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pose": [float(v) for v in self.pose.ravel()],
            "capture_q": [float(v) for v in self.capture_q],
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            rec["fx"], rec["fy"], rec["cx"], rec["cy"], rec["width"], rec["height"],
            np.array(rec["pose"]).reshape(4, 4), np.array(rec.get("capture_q", [0, 0, 0])),
        )


def camera_look_at(eye, target, fx, width, height, fy=None, cx=None, cy=None):
    """Camera at ``eye`` with optical axis through ``target``."""
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise DegenerateInput("eye and target coincide")
    forward /= norm
    ref = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, ref)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return CameraModel(
        fx, fy if fy is not None else fx,
        cx if cx is not None else (width - 1) / 2.0,
        cy if cy is not None else (height - 1) / 2.0,
        width, height, pose,
    )


def camera_attached(arm, q0, t_cam_ee, fx, width, height, fy=None, ee_z=0.25, **kw):
    """Wrist camera: pose = FK(q0) lifted to 3-D, composed with T_cam_ee."""
    ee = fk(arm, q0)
    c, s = math.cos(ee.yaw), math.sin(ee.yaw)
    t_ee_world = np.eye(4)
    t_ee_world[:3, :3] = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t_ee_world[:3, 3] = [ee.x, ee.y, ee_z]
    pose = t_ee_world @ np.asarray(t_cam_ee, dtype=float).reshape(4, 4)
    cam = CameraModel(
        fx, fy if fy is not None else fx,
        kw.get("cx", (width - 1) / 2.0), kw.get("cy", (height - 1) / 2.0),
        width, height, pose, capture_q=np.asarray(q0, dtype=float),
    )
    return cam


@dataclass
class Observation:
    """Depth grid plus per-detection masks/labels (the synthetic sensor frame)."""

    depth: np.ndarray
    masks: dict
    labels: dict
    capture_config: np.ndarray = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.capture_config is None:
            self.capture_config = np.zeros(3)

    def to_bytes(self, camera):
        """Container layout: see README (little-endian f32 depth + RLE masks)."""
        header = {
            "camera": camera.record(),
            "labels": {str(k): v for k, v in sorted(self.labels.items())},
            "capture_config": [float(v) for v in self.capture_config],
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(OBSERVATION_MAGIC)
        buf.write(struct.pack("<HI", OBSERVATION_VERSION, len(hbytes)))
        buf.write(hbytes)
        buf.write(struct.pack("<II", self.depth.shape[0], self.depth.shape[1]))
        buf.write(self.depth.astype("<f4").tobytes(order="C"))
        buf.write(struct.pack("<I", len(self.masks)))
        for obj_id in sorted(self.masks):
            runs = _rle_encode(self.masks[obj_id].ravel())
            buf.write(struct.pack("<II", obj_id, len(runs)))
            for start, length in runs:
                buf.write(struct.pack("<II", start, length))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        buf = io.BytesIO(data)
        if buf.read(4) != OBSERVATION_MAGIC:
            raise DegenerateInput("not an observation container")
        version, hlen = struct.unpack("<HI", buf.read(6))
        if version != OBSERVATION_VERSION:
            raise DegenerateInput(f"unsupported container version {version}")
        header = json.loads(buf.read(hlen).decode("utf-8"))
        rows, cols = struct.unpack("<II", buf.read(8))
        depth = np.frombuffer(buf.read(rows * cols * 4), dtype="<f4").reshape(rows, cols)
        (n_masks,) = struct.unpack("<I", buf.read(4))
        masks = {}
        for _ in range(n_masks):
            obj_id, n_runs = struct.unpack("<II", buf.read(8))
            flat = np.zeros(rows * cols, dtype=bool)
            for _ in range(n_runs):
                start, length = struct.unpack("<II", buf.read(8))
                flat[start : start + length] = True
            masks[obj_id] = flat.reshape(rows, cols)
        labels = {int(k): v for k, v in header["labels"].items()}
        camera = CameraModel.from_record(header["camera"])
        obs = cls(depth.astype(float), masks, labels, np.array(header["capture_config"]))
        return obs, camera


def _rle_encode(flat):
    flat = np.asarray(flat, dtype=bool)
    if not flat.any():
        return []
    padded = np.concatenate([[False], flat, [False]])
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = changes[0::2], changes[1::2]
    return list(zip(starts.tolist(), (ends - starts).tolist()))


# --- rendering ---

def render_observation(scene, camera, noise=(0.0, 0), seed=0):
    """Depth + ground-truth masks by per-pixel ray casting.

    ``noise`` = (depth sigma in meters, mask morphology pixels: > 0 erodes,
    < 0 dilates). Raises EmptyView when no object pixel is visible.
    """
    sigma, morph = noise
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack(
        [
            (cols.ravel() - camera.cx) / camera.fx,
            (rows.ravel() - camera.cy) / camera.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    scale = np.linalg.norm(dirs_cam, axis=1)
    dirs_world = (camera.rotation @ (dirs_cam / scale[:, None]).T).T
    t, ids = ray_cast_batch(scene, camera.position, dirs_world)
    depth = np.where(np.isfinite(t), t / scale, np.nan).reshape(h, w)
    ids = ids.reshape(h, w)

    if not np.any(ids >= 0):
        raise EmptyView("no object visible from the camera")

    masks = {}
    labels = {}
    claimed = np.zeros((h, w), dtype=bool)
    for idx in range(len(scene.objects)):
        mask = ids == idx
        if morph > 0:
            mask = ndimage.binary_erosion(mask, np.ones((3, 3)), iterations=morph)
        elif morph < 0:
            mask = ndimage.binary_dilation(mask, np.ones((3, 3)), iterations=-morph)
            mask &= ~claimed  # keep masks disjoint, lower ids win
        claimed |= mask
        masks[idx] = mask
        labels[idx] = scene.objects[idx].name

    if sigma > 0:
        rng = generator(seed, "depth-noise")
        finite = np.isfinite(depth)
        depth = depth + np.where(finite, rng.normal(0.0, sigma, size=depth.shape), 0.0)
    return Observation(depth, masks, labels, camera.capture_q.copy())


def unproject(obs, camera):
    """Depth map -> world point cloud with pixel provenance (NaNs skipped)."""
    finite = np.isfinite(obs.depth)
    rows, cols = np.nonzero(finite)
    d = obs.depth[rows, cols]
    p_cam = np.stack(
        [d * (cols - camera.cx) / camera.fx, d * (rows - camera.cy) / camera.fy, d],
        axis=1,
    )
    points = p_cam @ camera.rotation.T + camera.position
    return PointCloud(points, np.stack([rows, cols], axis=1))


# --- table + object reconstruction ---

@dataclass
class RansacConfig:
    iterations: int = 256
    inlier_tol: float = 0.005
    min_inlier_frac: float = 0.3
    seed: int = 0


@dataclass
class TableDetection:
    plane: Plane3
    workspace: OBB2
    inliers: np.ndarray


def detect_table(cloud, cfg=None):
    """Dominant plane via RANSAC; workspace = min-area rectangle of inliers.

    The dominant plane is assumed to be the table. Known hazard: when a
    single large flat object dominates the view, its top face wins instead.
    """
    cfg = cfg or RansacConfig()
    if len(cloud) == 0:
        raise DegenerateInput("empty cloud")
    plane, inliers = ransac_plane(
        cloud, cfg.iterations, cfg.inlier_tol, cfg.min_inlier_frac, cfg.seed
    )
    workspace = min_area_obb(cloud.points[inliers][:, :2])
    return TableDetection(plane, workspace, inliers)


def plane_height_at(plane, xy):
    """z of a (near-horizontal) plane at a ground position."""
    nx, ny, nz = plane.normal
    if abs(nz) < 1e-9:
        raise DegenerateInput("plane is vertical")
    return -(plane.offset + nx * xy[0] + ny * xy[1]) / nz


def reconstruct_objects(cloud, obs, table):
    """Per-mask hulls: gather masked points, drop to the lowest observed z.

    z_base floors at table height - 1 mm (noise may dip below the plane, the
    world cannot). height clamps at 1 mm to keep degenerate single-face views
    representable. Raises TooFewPoints when a mask selects < 3 cloud points.
    """
    h, w = obs.depth.shape
    pix_to_idx = np.full((h, w), -1, dtype=int)
    pix_to_idx[cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]] = np.arange(len(cloud))
    out = {}
    for obj_id in sorted(obs.masks):
        mask = obs.masks[obj_id]
        idxs = pix_to_idx[mask]
        idxs = idxs[idxs >= 0]
        if len(idxs) < 3:
            raise TooFewPoints(obj_id, len(idxs))
        pts = cloud.points[idxs]
        try:
            hull = convex_hull_2d(pts[:, :2])
        except DegenerateInput as exc:
            raise TooFewPoints(obj_id, len(idxs)) from exc
        z_base = float(pts[:, 2].min())
        floor = plane_height_at(table, polygon_centroid(hull)) - 1e-3 if table else -np.inf
        z_base = max(z_base, floor)
        height = max(float(pts[:, 2].max()) - z_base, 1e-3)
        out[obj_id] = ConvexFootprint(hull, height, z_base)
    return out


# --- grasp sampling / assignment ---

@dataclass
class GripperSpec:
    max_width: float = 0.10
    finger_radius: float = 0.010
    clearance: float = 0.010


@dataclass
class GraspCandidate:
    object_id: int
    approach_pose: Pose2
    width: float
    score: float
    contact_point: np.ndarray

    def __post_init__(self):
        self.contact_point = np.asarray(self.contact_point, dtype=float).reshape(2)

    def finger_discs(self, gripper, pose=None):
        """Two finger discs at the (possibly re-posed) grasp."""
        pose = pose or self.approach_pose
        half = self.width / 2.0 + gripper.finger_radius
        u = np.array([math.cos(pose.yaw), math.sin(pose.yaw)])
        center = np.array([pose.x, pose.y])
        centers = np.stack([center + half * u, center - half * u])
        return DiscSet(centers, np.full(2, gripper.finger_radius))


def _grasp_axis_angles(vertices):
    """Candidate closing directions: edge normals + principal box axes, mod pi."""
    v = np.asarray(vertices)
    e = np.roll(v, -1, axis=0) - v
    normals = np.arctan2(-e[:, 0], e[:, 1])
    obb = min_area_obb(v)
    cand = np.concatenate([normals, [obb.angle, obb.angle + math.pi / 2.0]])
    cand = np.mod(cand, math.pi)
    cand = np.sort(cand)
    keep = [cand[0]]
    for a in cand[1:]:
        if a - keep[-1] > 1e-6 and (math.pi - a + cand[0]) > 1e-6:
            keep.append(a)
    return keep


def sample_grasps(belief_objects, gripper, n_per_object=8, seed=0, check_collisions=True):
    """Antipodal top-down candidates across edge-pair and principal directions.

    ``belief_objects``: mapping id -> object with .hull (ConvexFootprint) and
    .discs_world (DiscSet). Candidates wider than the gripper are dropped;
    with ``check_collisions`` finger discs must clear every *other* object
    whose z-interval overlaps the target's. Objects may end with zero grasps.
    The sampler is exhaustive and deterministic; ``seed`` is unused.
    """
    del seed
    out = []
    for obj_id in sorted(belief_objects):
        obj = belief_objects[obj_id]
        verts = obj.hull.vertices
        centroid = polygon_centroid(verts)
        cands = []
        for theta in _grasp_axis_angles(verts):
            extent = caliper_extent(verts, theta)
            width = extent + gripper.clearance
            if width > gripper.max_width + 1e-12:
                continue
            cand = GraspCandidate(
                obj_id,
                Pose2(centroid[0], centroid[1], theta),
                width,
                1.0 - width / gripper.max_width,
                centroid,
            )
            if check_collisions and _fingers_collide(cand, gripper, obj_id, belief_objects):
                continue
            cands.append(cand)
        cands.sort(key=lambda c: (-c.score, c.approach_pose.yaw))
        out.extend(cands[: max(1, int(n_per_object))])
    return out


def _fingers_collide(cand, gripper, target_id, belief_objects):
    fingers = cand.finger_discs(gripper)
    target = belief_objects[target_id]
    t_lo, t_hi = target.hull.z_base, target.hull.z_top
    for other_id, other in belief_objects.items():
        if other_id == target_id:
            continue
        o_lo, o_hi = other.hull.z_base, other.hull.z_top
        if min(t_hi, o_hi) - max(t_lo, o_lo) <= 1e-9:
            continue
        if disc_set_distance(fingers, other.discs_world).hard < 0.0:
            return True
    return False


def assign_grasps(candidates, object_clouds, threshold=0.02):
    """Re-label each grasp to the nearest object point; drop far candidates.

    ``object_clouds``: mapping id -> (n, 2) or (n, 3) points. Assignment uses
    ground-plane distances; nearest-point ties resolve to the lowest id.
    """
    ids = sorted(object_clouds)
    stacks, owners = [], []
    for obj_id in ids:
        pts = np.asarray(object_clouds[obj_id], dtype=float)
        if pts.size == 0:
            continue
        stacks.append(pts[:, :2])
        owners.append(np.full(len(pts), obj_id))
    if not stacks:
        raise DegenerateInput("object clouds are empty")
    points = np.vstack(stacks)
    owner = np.concatenate(owners)
    index = NNIndex(points)
    kept = []
    for cand in candidates:
        point_id, dist = index.query(cand.contact_point)
        if dist > threshold:
            continue
        kept.append(
            GraspCandidate(
                int(owner[point_id]), cand.approach_pose, cand.width, cand.score,
                cand.contact_point,
            )
        )
    return kept


# --- belief assembly ---

@dataclass
class BeliefObject:
    object_id: int
    label: str
    hull: ConvexFootprint
    discs_world: DiscSet
    grasps: list = field(default_factory=list)

    def __post_init__(self):
        centroid = polygon_centroid(self.hull.vertices)
        self.init_pose = Pose2(centroid[0], centroid[1], 0.0)
        self.local_vertices = self.hull.vertices - centroid
        self.discs_local = DiscSet(
            self.discs_world.centers - centroid, self.discs_world.radii.copy()
        )
        self.circumradius = float(np.max(np.linalg.norm(self.local_vertices, axis=1)))
        self.top_obb = min_area_obb(self.hull.vertices)

    def grasp_local(self, cand):
        """Grasp pose expressed in the object's canonical (centroid) frame."""
        return self.init_pose.inverse().compose(cand.approach_pose)

    def sample_points_local(self, n_side=5):
        """Deterministic interior grid for the smoothed support-overlap cost."""
        obb = min_area_obb(self.local_vertices)
        hx, hy = obb.half_extents
        xs = np.linspace(-hx, hx, n_side)
        ys = np.linspace(-hy, hy, n_side)
        gx, gy = np.meshgrid(xs, ys)
        pts = obb.from_local(np.stack([gx.ravel(), gy.ravel()], axis=1))
        keep = [p for p in pts if _point_in(self.local_vertices, p)]
        keep.append(np.zeros(2))
        return np.array(keep)


def _point_in(vertices, p):
    v = np.asarray(vertices)
    e = np.roll(v, -1, axis=0) - v
    rel = p - v
    return bool(np.all(e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0] >= -1e-12))


@dataclass
class SceneBelief:
    table: Plane3
    workspace: OBB2
    objects: dict
    surfaces: dict = field(default_factory=dict)
    wipe_regions: dict = field(default_factory=dict)

    def label_to_id(self):
        return {obj.label: obj_id for obj_id, obj in self.objects.items()}

    def by_label(self, label):
        for obj in self.objects.values():
            if obj.label == label:
                return obj
        raise KeyError(label)


@dataclass
class PerceptionConfig:
    noise_sigma: float = 0.0
    mask_morph: int = 0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    disc_target_radius: float = 0.01
    grasp_threshold: float = 0.02
    n_grasps_per_object: int = 8


def build_belief(scene, camera, gripper, cfg=None, seed=0):
    """Full perception pass: render -> unproject -> table -> hulls -> grasps.

    Returns (observation, cloud, SceneBelief).
    """
    cfg = cfg or PerceptionConfig()
    rcfg = RansacConfig(
        cfg.ransac.iterations, cfg.ransac.inlier_tol, cfg.ransac.min_inlier_frac, seed
    )
    obs = render_observation(scene, camera, (cfg.noise_sigma, cfg.mask_morph), seed)
    cloud = unproject(obs, camera)
    table = detect_table(cloud, rcfg)
    hulls = reconstruct_objects(cloud, obs, table.plane)

    objects = {}
    clouds = {}
    h, w = obs.depth.shape
    pix_to_idx = np.full((h, w), -1, dtype=int)
    pix_to_idx[cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]] = np.arange(len(cloud))
    for obj_id, hull in hulls.items():
        discs = disc_decompose(hull, cfg.disc_target_radius)
        objects[obj_id] = BeliefObject(obj_id, obs.labels[obj_id], hull, discs)
        idxs = pix_to_idx[obs.masks[obj_id]]
        clouds[obj_id] = cloud.points[idxs[idxs >= 0]]

    candidates = sample_grasps(objects, gripper, cfg.n_grasps_per_object)
    candidates = assign_grasps(candidates, clouds, cfg.grasp_threshold)
    for cand in candidates:
        objects[cand.object_id].grasps.append(cand)

    surfaces = {obj_id: obj.top_obb for obj_id, obj in objects.items()}
    belief = SceneBelief(table.plane, table.workspace, objects, surfaces)
    return obs, cloud, belief


def localize_wipe_region(obs, surface_id, cloud, bbox):
    """Map a grounder bounding box (0-1000 ints) onto the surface in world.

    Each bbox corner maps to the nearest surface-masked pixel with depth
    inside the box; the region is the min-area rectangle over those points.
    """
    h, w = obs.depth.shape
    ymin, xmin, ymax, xmax = bbox
    r0 = int(math.floor(ymin / 1000.0 * h))
    r1 = max(r0 + 1, int(math.ceil(ymax / 1000.0 * h)))
    c0 = int(math.floor(xmin / 1000.0 * w))
    c1 = max(c0 + 1, int(math.ceil(xmax / 1000.0 * w)))
    mask = obs.masks.get(surface_id)
    if mask is None:
        raise NoSurfacePoints(f"no mask for surface {surface_id}")
    box = np.zeros_like(mask)
    box[max(r0, 0) : min(r1, h), max(c0, 0) : min(c1, w)] = True
    cand = mask & box & np.isfinite(obs.depth)
    rows, cols = np.nonzero(cand)
    if len(rows) == 0:
        raise NoSurfacePoints("bounding box misses the surface")
    pix_to_idx = {}
    for i, (r, c) in enumerate(cloud.source_pixel):
        pix_to_idx[(int(r), int(c))] = i
    corners_px = [(r0, c0), (r0, c1 - 1), (r1 - 1, c1 - 1), (r1 - 1, c0)]
    mapped = []
    for cr, cc in corners_px:
        d2 = (rows - cr) ** 2 + (cols - cc) ** 2
        j = int(np.argmin(d2))
        idx = pix_to_idx.get((int(rows[j]), int(cols[j])))
        if idx is None:
            raise NoSurfacePoints("surface pixel lacks a cloud point")
        mapped.append(cloud.points[idx][:2])
    return min_area_obb(np.array(mapped))

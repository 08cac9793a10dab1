"""Open-loop execution: joint impedance tracking over simulated rigid
dynamics, gripper attach/detach with an injectable grasp-outcome model,
and wipe-stroke generation/coverage.

The plant is a decoupled diagonal-inertia arm with viscous joint friction
the controller does not model; the friction term is what makes tracking
quality actually depend on the gains.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, EraserTooLarge
from .geom import (
    Pose2,
    min_area_obb,
    point_in_convex,
    point_polygon_distance,
    polygon_centroid,
    wrap_angle,
)
from .motion import fk_batch
from .rng import generator


@dataclass
class ControllerGains:
    """Per-joint impedance gains; kd defaults to critical damping 2*sqrt(kp*m)."""

    kp: np.ndarray = None
    kd: np.ndarray = None
    m: np.ndarray = None
    tau_coriolis: np.ndarray = None
    tau_g: np.ndarray = None

    def __post_init__(self):
        self.kp = np.array([600.0, 400.0, 200.0]) if self.kp is None else np.asarray(self.kp, float)
        self.m = np.array([2.0, 1.5, 0.5]) if self.m is None else np.asarray(self.m, float)
        if self.kd is None:
            self.kd = 2.0 * np.sqrt(self.kp * self.m)
        else:
            self.kd = np.asarray(self.kd, dtype=float)
        self.tau_coriolis = np.zeros(3) if self.tau_coriolis is None else np.asarray(self.tau_coriolis, float)
        self.tau_g = np.zeros(3) if self.tau_g is None else np.asarray(self.tau_g, float)
        if np.any(self.kp <= 0) or np.any(self.kd <= 0) or np.any(self.m <= 0):
            raise DegenerateInput("gains and inertia must be positive")


def step_controller(gains, state, desired):
    """Impedance torque: kp(qd-q) + kd(qdd-qd) + coriolis + gravity + m*qddot_d."""
    q, qdot = state
    q_d, qdot_d, qddot_d = desired
    return (
        gains.kp * (np.asarray(q_d) - np.asarray(q))
        + gains.kd * (np.asarray(qdot_d) - np.asarray(qdot))
        + gains.tau_coriolis
        + gains.tau_g
        + gains.m * np.asarray(qddot_d)
    )


class AccelEstimator:
    """First-order low-pass over the finite difference of the velocity reference."""

    def __init__(self, cutoff_hz=50.0):
        self.cutoff_hz = cutoff_hz
        self._prev_qdot = None
        self._y = np.zeros(3)

    def update(self, qdot_d, dt):
        if self._prev_qdot is None or dt <= 0:
            self._prev_qdot = np.asarray(qdot_d, dtype=float).copy()
            return self._y.copy()
        raw = (np.asarray(qdot_d) - self._prev_qdot) / dt
        alpha = dt / (dt + 1.0 / (2.0 * math.pi * self.cutoff_hz))
        self._y = self._y + alpha * (raw - self._y)
        self._prev_qdot = np.asarray(qdot_d, dtype=float).copy()
        return self._y.copy()


@dataclass
class GraspModel:
    """Injectable grasp-outcome model. slip_per_second drives failure studies."""

    slip_per_second: float = 0.0
    position_window: float = 0.002
    yaw_window: float = math.radians(2.0)


@dataclass
class ExecConfig:
    joint_damping: tuple = (2.0, 1.5, 0.8)
    accel_cutoff_hz: float = 50.0
    finger_radius: float = 0.010
    wipe_stamp_dt: float = 0.005


@dataclass
class GraspRef:
    """Planned grasp annotation consumed at a gripper-close sample."""

    object_name: str
    pose: Pose2
    width: float


@dataclass
class GraspEvent:
    object_name: str
    attempt_pose: tuple
    success: bool
    t: float
    slip_time: float = None


@dataclass
class ExecOutcome:
    tracked: np.ndarray
    max_ee_error: float
    grasp_events: list
    final_scene: object
    wiped_coverage: dict
    q_history: np.ndarray = None
    ee_error: np.ndarray = None

    def __post_init__(self):
        if self.max_ee_error < 0:
            raise DegenerateInput("max_ee_error must be non-negative")


def _segment_hits_polygon(p0, p1, vertices, n=17):
    ts = np.linspace(0.0, 1.0, n)
    pts = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
    return any(point_in_convex(vertices, p) for p in pts)


def simulate_trajectory(scene, arm, gains, traj, grasp_model=None, seed=0,
                        grasp_refs=(), cfg=None):
    """Track ``traj`` on the simulated plant; manipulate the scene kinematically.

    Gripper close samples trigger grasp attempts: success requires the
    simulated gripper pose within the grasp window of the next planned grasp,
    collision-free fingers, and the target actually between the fingers.
    Failures are recorded in the outcome, never raised.
    """
    grasp_model = grasp_model or GraspModel()
    cfg = cfg or ExecConfig()
    rng = generator(seed, "exec")
    sim = scene.copy()
    damping = np.asarray(cfg.joint_damping, dtype=float)

    n = len(traj)
    q = traj.q[0].copy()
    qdot = traj.qdot[0].copy()
    q_hist = np.zeros((n, 3))
    q_hist[0] = q
    est = AccelEstimator(cfg.accel_cutoff_hz)

    refs = list(grasp_refs)
    next_ref = 0
    held = None  # (object index, grasp offset Pose2, width)
    grasp_events = []
    marked = sim.marked_names()
    last_stamp = -math.inf

    for i in range(1, n):
        dt = float(traj.t[i] - traj.t[i - 1])
        qddot_d = est.update(traj.qdot[i], dt)
        tau = step_controller(gains, (q, qdot), (traj.q[i], traj.qdot[i], qddot_d))
        qddot = (tau - damping * qdot) / gains.m
        qdot = qdot + dt * qddot
        q = q + dt * qdot
        q_hist[i] = q
        t_now = float(traj.t[i])

        if held is not None:
            ee_pose = _ee_pose(arm, q)
            obj = sim.objects[held[0]]
            obj.pose = ee_pose.compose(held[1])
            if grasp_model.slip_per_second > 0 and rng.random() < grasp_model.slip_per_second * dt:
                _drop(sim, held[0])
                for ev in reversed(grasp_events):
                    if ev.object_name == obj.name and ev.success:
                        ev.slip_time = t_now
                        break
                held = None
            elif obj.is_eraser and marked and t_now - last_stamp >= cfg.wipe_stamp_dt:
                verts = obj.world_vertices()
                for name in marked:
                    sim.wipe_grid(name).stamp_polygon(verts)
                last_stamp = t_now

        if traj.g[i] != traj.g[i - 1]:
            if traj.g[i] == 1:
                ref = refs[next_ref] if next_ref < len(refs) else None
                next_ref += 1
                ee_pose = _ee_pose(arm, q)
                ok, target_idx = _attempt_grasp(sim, arm, ee_pose, ref, grasp_model, cfg)
                name = ref.object_name if ref else ""
                grasp_events.append(
                    GraspEvent(name, (ee_pose.x, ee_pose.y, ee_pose.yaw), ok, t_now)
                )
                if ok:
                    offset = ee_pose.inverse().compose(sim.objects[target_idx].pose)
                    held = (target_idx, offset, ref.width)
            else:
                if held is not None:
                    _drop(sim, held[0])
                    held = None

    if held is not None:
        _drop(sim, held[0])

    err = traj.q - q_hist
    ee_ref = fk_batch(arm, traj.q)[:, :2]
    ee_sim = fk_batch(arm, q_hist)[:, :2]
    ee_err = np.linalg.norm(ee_ref - ee_sim, axis=1)
    coverage = {name: sim.wipe_grid(name).coverage() for name in marked}
    return ExecOutcome(
        tracked=err,
        max_ee_error=float(ee_err.max()),
        grasp_events=grasp_events,
        final_scene=sim,
        wiped_coverage=coverage,
        q_history=q_hist,
        ee_error=ee_err,
    )


def _ee_pose(arm, q):
    pose = fk_batch(arm, q[None, :])[0]
    return Pose2(pose[0], pose[1], pose[2])


def _attempt_grasp(sim, arm, ee_pose, ref, grasp_model, cfg):
    if ref is None:
        return False, -1
    dp = math.hypot(ee_pose.x - ref.pose.x, ee_pose.y - ref.pose.y)
    dyaw = abs(float(wrap_angle(ee_pose.yaw - ref.pose.yaw)))
    if dp > grasp_model.position_window or dyaw > grasp_model.yaw_window:
        return False, -1
    try:
        target_idx = sim.index_of(ref.object_name)
    except Exception:
        return False, -1
    target = sim.objects[target_idx]
    # the closing segment must actually cross the object
    half = ref.width / 2.0 + cfg.finger_radius
    u = np.array([math.cos(ee_pose.yaw), math.sin(ee_pose.yaw)])
    center = np.array([ee_pose.x, ee_pose.y])
    f1, f2 = center + half * u, center - half * u
    if not _segment_hits_polygon(f1, f2, target.world_vertices()):
        return False, -1
    for idx, obj in enumerate(sim.objects):
        if idx == target_idx:
            continue
        if min(target.z_top, obj.z_top) - max(target.z_base, obj.z_base) <= 1e-9:
            continue
        verts = obj.world_vertices()
        if any(point_polygon_distance(verts, c) < cfg.finger_radius for c in (f1, f2)):
            return False, -1
    return True, target_idx


def _drop(sim, obj_idx):
    obj = sim.objects[obj_idx]
    support, top = sim.support_below(obj.world_centroid(), exclude_name=obj.name)
    del support
    obj.z_base = top


# --- wiping ---

def generate_wipe_strokes(region, eraser_vertices, overlap=0.25):
    """Boustrophedon eraser poses covering an oriented rectangular region.

    Strokes run along the region's long axis with rows spaced by the eraser's
    across-stroke width times (1 - overlap), pinned at the region edges. A
    region the eraser fully covers yields one centered stroke.
    """
    if not 0.0 <= overlap < 1.0:
        raise DegenerateInput("overlap must be in [0, 1)")
    verts = np.asarray(eraser_vertices, dtype=float)
    hu, hv = float(region.half_extents[0]), float(region.half_extents[1])
    angle = region.angle
    if hu < hv:
        hu, hv = hv, hu
        angle += math.pi / 2.0
    eobb = min_area_obb(verts)
    el, ew = float(eobb.half_extents[0]), float(eobb.half_extents[1])
    e_angle = eobb.angle
    if el < ew:
        el, ew = ew, el
        e_angle += math.pi / 2.0
    # eraser pose that aligns its long axis with the stroke direction
    yaw = angle - e_angle
    centroid = polygon_centroid(verts)

    def pose_at(local_xy):
        world = np.array(
            [
                region.center[0] + math.cos(angle) * local_xy[0] - math.sin(angle) * local_xy[1],
                region.center[1] + math.sin(angle) * local_xy[0] + math.cos(angle) * local_xy[1],
            ]
        )
        # position the eraser so its centroid lands on the stroke point
        c, s = math.cos(yaw), math.sin(yaw)
        rot_centroid = np.array([c * centroid[0] - s * centroid[1], s * centroid[0] + c * centroid[1]])
        return Pose2(world[0] - rot_centroid[0], world[1] - rot_centroid[1], yaw)

    covered = _eraser_covers_region(region, verts, pose_at(np.zeros(2)))
    if covered:
        return [pose_at(np.zeros(2))]
    if 2.0 * ew > 2.0 * hv + 1e-12:
        raise EraserTooLarge(
            f"eraser width {2 * ew:.3f} exceeds region short side {2 * hv:.3f}"
        )
    spacing_max = 2.0 * ew * (1.0 - overlap)
    n_rows = 1 + max(1, math.ceil(2.0 * hv / spacing_max - 1e-12))
    ys = np.linspace(-hv, hv, n_rows)
    x_end = max(0.0, hu - el)
    poses = []
    for j, y in enumerate(ys):
        xs = (-x_end, x_end) if j % 2 == 0 else (x_end, -x_end)
        for x in xs:
            poses.append(pose_at(np.array([x, y])))
    return poses


def _eraser_covers_region(region, eraser_vertices, pose):
    world = pose.transform(eraser_vertices)
    return all(point_in_convex(world, c) for c in region.corners())


def swept_coverage(region, eraser_vertices, poses, cell=0.001):
    """Fraction of the region's 1 mm grid covered by sweeping the eraser
    through consecutive poses (independent of the execution stamping path)."""
    from .scene import WipeGrid

    grid = WipeGrid(region, cell=cell)
    verts = np.asarray(eraser_vertices, dtype=float)
    if len(poses) == 1:
        grid.stamp_polygon(poses[0].transform(verts))
        return grid.coverage()
    eobb = min_area_obb(verts)
    step = float(min(eobb.half_extents)) / 2.0
    for pa, pb in zip(poses[:-1], poses[1:]):
        dist = math.hypot(pb.x - pa.x, pb.y - pa.y)
        n = max(2, int(math.ceil(dist / max(step, 1e-6))) + 1)
        for s in np.linspace(0.0, 1.0, n):
            pose = Pose2(pa.x + s * (pb.x - pa.x), pa.y + s * (pb.y - pa.y), pa.yaw)
            grid.stamp_polygon(pose.transform(verts))
    return grid.coverage()

"""Planar 3-revolute-joint arm: kinematics, RRT-Connect planning, timing.

The arm lives in the tabletop plane; link capsules and any held body are
collision-checked against disc obstacles, each gated by a z-interval so the
2.5-D world stays honest (a flat tray does not block a body carried above
it, a tall can does).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInput,
    GoalInCollision,
    JointLimit,
    MotionTimeout,
    StartInCollision,
    Unreachable,
)
from .geom import DiscSet, Pose2, wrap_angle
from .rng import generator


@dataclass
class ArmModel:
    link_lengths: tuple = (0.30, 0.25, 0.15)
    joint_limits: tuple = ((-math.pi, math.pi),) * 3
    link_radius: float = 0.03
    vmax: tuple = (1.0, 1.0, 1.5)
    amax: tuple = (4.0, 4.0, 6.0)
    base_xy: tuple = (0.0, 0.0)

    def __post_init__(self):
        if any(l <= 0 for l in self.link_lengths):
            raise DegenerateInput("link lengths must be positive")
        if any(lo >= hi for lo, hi in self.joint_limits):
            raise DegenerateInput("joint limits must satisfy lo < hi")
        if any(v <= 0 for v in self.vmax) or any(a <= 0 for a in self.amax):
            raise DegenerateInput("vmax and amax must be positive")

    @property
    def reach(self):
        return sum(self.link_lengths)

    def limits_lo(self):
        return np.array([lo for lo, _ in self.joint_limits])

    def limits_hi(self):
        return np.array([hi for _, hi in self.joint_limits])

    def within_limits(self, q, tol=1e-9):
        q = np.asarray(q)
        return bool(np.all(q >= self.limits_lo() - tol) and np.all(q <= self.limits_hi() + tol))


def fk(arm, q):
    """Gripper pose for joint vector q. Raises JointLimit outside limits."""
    q = np.asarray(q, dtype=float)
    if not arm.within_limits(q):
        raise JointLimit(f"configuration {q} outside joint limits")
    th = np.cumsum(q)
    x = arm.base_xy[0] + float(np.sum(arm.link_lengths * np.cos(th)))
    y = arm.base_xy[1] + float(np.sum(arm.link_lengths * np.sin(th)))
    return Pose2(x, y, float(th[-1]))


def fk_chain(arm, q):
    """(4, 2) positions: base, elbow, wrist, gripper."""
    q = np.asarray(q, dtype=float)
    th = np.cumsum(q)
    pts = np.zeros((4, 2))
    pts[0] = arm.base_xy
    acc = np.array(arm.base_xy, dtype=float)
    for i in range(3):
        acc = acc + arm.link_lengths[i] * np.array([math.cos(th[i]), math.sin(th[i])])
        pts[i + 1] = acc
    return pts


def fk_batch(arm, qs):
    """(N, 3) configurations -> (N, 3) poses (x, y, yaw) without limit checks."""
    qs = np.asarray(qs, dtype=float)
    th = np.cumsum(qs, axis=1)
    lengths = np.asarray(arm.link_lengths)
    x = arm.base_xy[0] + (lengths * np.cos(th)).sum(axis=1)
    y = arm.base_xy[1] + (lengths * np.sin(th)).sum(axis=1)
    return np.stack([x, y, wrap_angle(th[:, -1])], axis=1)


def fk_chain_batch(arm, qs):
    """(N, 3) configurations -> (N, 4, 2) chain positions."""
    qs = np.asarray(qs, dtype=float)
    th = np.cumsum(qs, axis=1)
    lengths = np.asarray(arm.link_lengths)
    steps = np.stack([lengths * np.cos(th), lengths * np.sin(th)], axis=2)
    pts = np.zeros((len(qs), 4, 2))
    pts[:, 0] = arm.base_xy
    pts[:, 1:] = np.asarray(arm.base_xy) + np.cumsum(steps, axis=1)
    return pts


def jacobian_batch(arm, qs):
    """(N, 3, 3) jacobian of (x, y, yaw) w.r.t. q."""
    qs = np.asarray(qs, dtype=float)
    th = np.cumsum(qs, axis=1)
    lengths = np.asarray(arm.link_lengths)
    sin_l = lengths * np.sin(th)
    cos_l = lengths * np.cos(th)
    jac = np.zeros((len(qs), 3, 3))
    for k in range(3):
        jac[:, 0, k] = -sin_l[:, k:].sum(axis=1)
        jac[:, 1, k] = cos_l[:, k:].sum(axis=1)
        jac[:, 2, k] = 1.0
    return jac


def ik(arm, target, n_branches=8, seed=0):
    """Closed-form inverse kinematics for a planar pose target.

    The yaw constraint leaves a discrete solution set (elbow-up/down), so at
    most two exact branches exist; n_branches only caps the returned count.
    Raises Unreachable when the wrist point leaves the two-link annulus.
    """
    del seed  # solutions are exact and enumerable; kept for interface stability
    l1, l2, l3 = arm.link_lengths
    wx = target.x - arm.base_xy[0] - l3 * math.cos(target.yaw)
    wy = target.y - arm.base_xy[1] - l3 * math.sin(target.yaw)
    r = math.hypot(wx, wy)
    if r > l1 + l2 + 1e-12 or r < abs(l1 - l2) - 1e-12:
        raise Unreachable(f"wrist radius {r:.4f} outside [{abs(l1 - l2):.4f}, {l1 + l2:.4f}]")
    cos_q2 = np.clip((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2), -1.0, 1.0)
    q2_mag = math.acos(cos_q2)
    # acos amplifies float error to ~1e-8 at the workspace boundary; the two
    # branches coincide there (and at the inner boundary, where +pi == -pi)
    if q2_mag < 1e-6 or math.pi - q2_mag < 1e-6:
        branches = [q2_mag]
    else:
        branches = [q2_mag, -q2_mag]
    sols = []
    for q2 in branches:
        q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
        q1 = float(wrap_angle(q1))
        q3 = float(wrap_angle(target.yaw - q1 - q2))
        q = np.array([q1, q2, q3])
        if arm.within_limits(q):
            sols.append(q)
    return sols[: max(1, int(n_branches))]


# --- collision world ---

_Z_ALL = (-math.inf, math.inf)


@dataclass
class ObstacleEntry:
    """Disc obstacle with the vertical interval it occupies."""

    discs: DiscSet
    z_interval: tuple = _Z_ALL
    name: str = ""


@dataclass
class HeldBody:
    """Discs rigid in the gripper frame, carried over a z-interval."""

    discs: DiscSet
    z_interval: tuple = _Z_ALL


@dataclass
class MotionWorld:
    obstacles: list = field(default_factory=list)
    held: HeldBody = None
    link_plane_z: float = None  # None: links collide with every obstacle
    margin: float = 0.0

    def link_active(self, entry):
        if self.link_plane_z is None:
            return True
        lo, hi = entry.z_interval
        return lo - 1e-9 <= self.link_plane_z <= hi + 1e-9

    def held_active(self, entry):
        lo, hi = entry.z_interval
        hlo, hhi = self.held.z_interval
        return min(hi, hhi) - max(lo, hlo) > 1e-9


def _segment_disc_clearance(a, b, centers, radii, cap_radius):
    """Min clearance between segments a->b (K, 2 each) and discs (m,)."""
    ab = b - a
    denom = np.einsum("kj,kj->k", ab, ab)
    denom = np.where(denom < 1e-18, 1.0, denom)
    rel = centers[None, :, :] - a[:, None, :]
    t = np.clip(np.einsum("kmj,kj->km", rel, ab) / denom[:, None], 0.0, 1.0)
    proj = a[:, None, :] + t[..., None] * ab[:, None, :]
    dist = np.linalg.norm(proj - centers[None, :, :], axis=2)
    return (dist - radii[None, :] - cap_radius).min(axis=1)


def config_clearance(arm, qs, world):
    """Min signed clearance of configurations (K, 3) against the world."""
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    k = len(qs)
    clear = np.full(k, np.inf)
    if not world.obstacles:
        return clear
    chain = fk_chain_batch(arm, qs)
    held_centers = None
    if world.held is not None and len(world.held.discs.centers):
        pose = fk_batch(arm, qs)
        c, s = np.cos(pose[:, 2]), np.sin(pose[:, 2])
        local = world.held.discs.centers
        hx = c[:, None] * local[:, 0] - s[:, None] * local[:, 1] + pose[:, 0:1]
        hy = s[:, None] * local[:, 0] + c[:, None] * local[:, 1] + pose[:, 1:2]
        held_centers = np.stack([hx, hy], axis=2)  # (K, m, 2)
    for entry in world.obstacles:
        centers = entry.discs.centers
        radii = entry.discs.radii
        if len(centers) == 0:
            continue
        if world.link_active(entry):
            for i in range(3):
                seg = _segment_disc_clearance(
                    chain[:, i], chain[:, i + 1], centers, radii, arm.link_radius
                )
                clear = np.minimum(clear, seg)
        if held_centers is not None and world.held_active(entry):
            diff = held_centers[:, :, None, :] - centers[None, None, :, :]
            dist = np.linalg.norm(diff, axis=3)
            pen = dist - world.held.discs.radii[None, :, None] - radii[None, None, :]
            clear = np.minimum(clear, pen.min(axis=(1, 2)))
    return clear


def _config_valid(arm, qs, world):
    return config_clearance(arm, qs, world) >= world.margin - 1e-9


def _edge_valid(arm, qa, qb, world, resolution):
    dist = float(np.max(np.abs(qb - qa)))
    n = max(2, int(math.ceil(dist / resolution)) + 1)
    states = qa + np.linspace(0.0, 1.0, n)[:, None] * (qb - qa)
    return bool(np.all(_config_valid(arm, states, world)))


@dataclass
class MotionConfig:
    max_iters: int = 3000
    step: float = 0.15
    resolution: float = 0.01
    shortcut_attempts: int = 100


def plan_path(arm, q_start, q_goal, world, seed=0, cfg=None):
    """RRT-Connect in joint space followed by a seeded shortcut pass.

    Returns a waypoint list starting exactly at q_start and ending at q_goal.
    """
    cfg = cfg or MotionConfig()
    q_start = np.asarray(q_start, dtype=float)
    q_goal = np.asarray(q_goal, dtype=float)
    if not _config_valid(arm, q_start[None, :], world)[0]:
        raise StartInCollision("path start in collision")
    if not _config_valid(arm, q_goal[None, :], world)[0]:
        raise GoalInCollision("path goal in collision")
    if _edge_valid(arm, q_start, q_goal, world, cfg.resolution):
        return [q_start.copy(), q_goal.copy()]

    rng = generator(seed, "rrt")
    lo, hi = arm.limits_lo(), arm.limits_hi()
    nodes_a, parents_a = [q_start.copy()], [-1]
    nodes_b, parents_b = [q_goal.copy()], [-1]
    tree_a = (nodes_a, parents_a)
    tree_b = (nodes_b, parents_b)
    swapped = False

    def nearest(nodes, q):
        arr = np.asarray(nodes)
        return int(np.argmin(np.linalg.norm(arr - q, axis=1)))

    def extend(tree, q_target):
        nodes, parents = tree
        idx = nearest(nodes, q_target)
        base = nodes[idx]
        delta = q_target - base
        dist = float(np.linalg.norm(delta))
        if dist < 1e-12:
            return idx, True
        q_new = q_target if dist <= cfg.step else base + delta / dist * cfg.step
        if not _edge_valid(arm, base, q_new, world, cfg.resolution):
            return -1, False
        nodes.append(q_new)
        parents.append(idx)
        return len(nodes) - 1, bool(dist <= cfg.step)

    def connect(tree, q_target):
        last = -1
        while True:
            idx, reached = extend(tree, q_target)
            if idx < 0:
                return last, False
            last = idx
            if reached:
                return idx, True

    path = None
    for _ in range(cfg.max_iters):
        q_rand = lo + rng.random(3) * (hi - lo)
        idx_a, _ = extend(tree_a, q_rand)
        if idx_a >= 0:
            idx_b, reached = connect(tree_b, tree_a[0][idx_a])
            if reached:
                branch_a = _trace(tree_a, idx_a)
                branch_b = _trace(tree_b, idx_b)
                if swapped:
                    path = branch_b[::-1] + branch_a
                else:
                    path = branch_a[::-1] + branch_b
                break
        tree_a, tree_b = tree_b, tree_a
        swapped = not swapped
    if path is None:
        raise MotionTimeout(cfg.max_iters)

    path = _shortcut(arm, path, world, cfg, rng)
    path[0] = q_start.copy()
    path[-1] = q_goal.copy()
    return path


def _trace(tree, idx):
    nodes, parents = tree
    out = []
    while idx >= 0:
        out.append(nodes[idx].copy())
        idx = parents[idx]
    return out


def _shortcut(arm, path, world, cfg, rng):
    path = [p.copy() for p in path]
    if len(path) > 2 and _edge_valid(arm, path[0], path[-1], world, cfg.resolution):
        return [path[0], path[-1]]
    for _ in range(cfg.shortcut_attempts):
        if len(path) <= 2:
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        if _edge_valid(arm, path[i], path[j], world, cfg.resolution):
            path = path[: i + 1] + path[j:]
    return path


# --- timed trajectories ---

@dataclass
class TimedTrajectory:
    """Sampled (t, q, qdot, g) reference; the pipeline's action output."""

    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.q = np.asarray(self.q, dtype=float).reshape(len(self.t), -1)
        self.qdot = np.asarray(self.qdot, dtype=float).reshape(len(self.t), -1)
        self.g = np.asarray(self.g, dtype=np.int8).reshape(-1)

    def __len__(self):
        return len(self.t)

    @property
    def duration(self):
        return float(self.t[-1]) if len(self.t) else 0.0

    def validate(self, arm, tol=1e-9):
        """Assert the trajectory invariants; raises AssertionError on breach."""
        assert len(self.t) >= 2, "trajectory needs at least 2 samples"
        assert abs(self.t[0]) <= tol, "time must start at 0"
        dt = np.diff(self.t)
        assert np.all(dt > 0), "time must be strictly increasing"
        vmax = np.asarray(arm.vmax)
        amax = np.asarray(arm.amax)
        assert np.all(np.abs(self.qdot) <= vmax + 1e-9), "velocity bound violated"
        dq = self.q[1:] - self.q[:-1] - self.qdot[:-1] * dt[:, None]
        assert np.all(np.abs(dq) <= amax * dt[:, None] ** 2 + 1e-12), "consistency violated"
        assert np.all(np.abs(self.qdot[0]) <= tol), "must start at rest"
        assert np.all(np.abs(self.qdot[-1]) <= tol), "must end at rest"
        switches = np.flatnonzero(self.g[1:] != self.g[:-1])
        for i in switches:
            assert np.all(np.abs(self.qdot[i]) <= 1e-9), "gripper change while moving"
            assert np.all(np.abs(self.qdot[i + 1]) <= 1e-9), "gripper change while moving"


def _trapezoid(dist, vbar, abar):
    """Closed-form trapezoid on a unit path parameter scaled by dist."""
    if vbar * vbar / abar >= dist:
        t_acc = math.sqrt(dist / abar)
        return 2.0 * t_acc, t_acc, abar * t_acc
    t_acc = vbar / abar
    return dist / vbar + vbar / abar, t_acc, vbar


def segment_duration(arm, qa, qb, dilation=1.0):
    """Duration of one synchronized trapezoid segment (0 for no motion)."""
    delta = np.abs(np.asarray(qb, dtype=float) - np.asarray(qa, dtype=float))
    if float(delta.max()) < 1e-12:
        return 0.0
    moving = delta > 1e-12
    vbar = float(np.min(np.asarray(arm.vmax)[moving] * dilation / delta[moving]))
    abar = float(np.min(np.asarray(arm.amax)[moving] * dilation**2 / delta[moving]))
    total, _, _ = _trapezoid(1.0, vbar, abar)
    return total


def time_parameterize(arm, path, dilation=1.0, control_dt=0.001, gripper=0):
    """Trapezoidal timing of a joint path at vmax*dilation / amax*dilation^2.

    Full stop at every waypoint; resampled on the control period with exact
    segment endpoints included.
    """
    path = [np.asarray(p, dtype=float) for p in path]
    if len(path) < 2:
        raise DegenerateInput("path needs >= 2 waypoints")
    times = [0.0]
    qs = [path[0].copy()]
    qdots = [np.zeros(3)]
    t0 = 0.0
    for qa, qb in zip(path[:-1], path[1:]):
        delta = qb - qa
        span = float(np.abs(delta).max())
        if span < 1e-12:
            continue
        moving = np.abs(delta) > 1e-12
        vbar = float(np.min(np.asarray(arm.vmax)[moving] * dilation / np.abs(delta)[moving]))
        abar = float(np.min(np.asarray(arm.amax)[moving] * dilation**2 / np.abs(delta)[moving]))
        total, t_acc, vpeak = _trapezoid(1.0, vbar, abar)
        n_grid = int(math.floor(total / control_dt))
        local = np.arange(1, n_grid + 1) * control_dt
        if len(local) == 0 or total - local[-1] > 1e-9:
            local = np.append(local, total)
        else:
            local[-1] = total
        for tl in local:
            s, sdot = _trapezoid_state(tl, total, t_acc, vpeak, abar)
            times.append(t0 + tl)
            qs.append(qa + s * delta)
            qdots.append(sdot * delta)
        qdots[-1] = np.zeros(3)
        qs[-1] = qb.copy()
        t0 += total
    if len(times) == 1:  # all segments were zero length: emit a short dwell
        times.append(control_dt)
        qs.append(path[0].copy())
        qdots.append(np.zeros(3))
    g = np.full(len(times), gripper, dtype=np.int8)
    return TimedTrajectory(np.array(times), np.array(qs), np.array(qdots), g)


def _trapezoid_state(t, total, t_acc, vpeak, abar):
    t = min(max(t, 0.0), total)
    if t <= t_acc:
        return 0.5 * abar * t * t, abar * t
    if t >= total - t_acc:
        rem = total - t
        return 1.0 - 0.5 * abar * rem * rem, abar * rem
    return 0.5 * abar * t_acc * t_acc + vpeak * (t - t_acc), vpeak


def make_dwell(q, duration, gripper, control_dt=0.001, start_t=0.0):
    """Stationary trajectory piece holding configuration q."""
    n = max(2, int(round(duration / control_dt)) + 1)
    t = start_t + np.linspace(0.0, duration, n)
    q = np.asarray(q, dtype=float)
    return TimedTrajectory(
        t, np.tile(q, (n, 1)), np.zeros((n, 3)), np.full(n, gripper, dtype=np.int8)
    )


def concat_trajectories(pieces):
    """Join trajectory pieces end to end (each restarts its clock at 0)."""
    pieces = [p for p in pieces if len(p) > 0]
    if not pieces:
        raise DegenerateInput("nothing to concatenate")
    ts, qs, qds, gs = [pieces[0].t], [pieces[0].q], [pieces[0].qdot], [pieces[0].g]
    offset = float(pieces[0].t[-1])
    for piece in pieces[1:]:
        ts.append(piece.t[1:] + offset)
        qs.append(piece.q[1:])
        qds.append(piece.qdot[1:])
        gs.append(piece.g[1:])
        offset += float(piece.t[-1])
    return TimedTrajectory(
        np.concatenate(ts), np.vstack(qs), np.vstack(qds), np.concatenate(gs)
    )

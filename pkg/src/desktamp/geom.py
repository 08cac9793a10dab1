"""Deterministic 2-D / 2.5-D geometry kernels shared by the whole pipeline.

Conventions:
  * polygons are counter-clockwise vertex arrays of shape (m, 2), meters
  * planes satisfy normal . p + offset = 0 with a unit normal
  * poses are (x, y, yaw) with yaw normalized to (-pi, pi]
  * all randomized routines take an explicit 64-bit seed
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree

from .errors import DegenerateInput, NoPlaneFound
from .rng import generator

COLLINEAR_TOL = 1e-9


def wrap_angle(a):
    """Normalize an angle (array ok) to (-pi, pi]."""
    w = -((-np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi)
    return w


@dataclass(frozen=True)
class Pose2:
    """Planar rigid pose; yaw stored normalized to (-pi, pi]."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    def as_array(self):
        return np.array([self.x, self.y, self.yaw])

    def compose(self, other):
        """self * other: apply ``other`` in this pose's frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def transform(self, points):
        """Apply to (m, 2) points."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return np.asarray(points) @ rot.T + np.array([self.x, self.y])


def pose_from_array(arr):
    return Pose2(arr[0], arr[1], arr[2])


@dataclass
class ConvexFootprint:
    """Extruded convex polygon: CCW vertices at z_base, extruded by height."""

    vertices: np.ndarray
    height: float
    z_base: float = 0.0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[0] < 3 or self.vertices.shape[1] != 2:
            raise DegenerateInput("footprint needs >= 3 planar vertices")
        crosses = _edge_crosses(self.vertices)
        e1 = np.roll(self.vertices, -1, axis=0) - self.vertices
        scale = np.linalg.norm(e1, axis=1)
        if np.any(scale < 1e-12) or np.any(crosses / scale <= COLLINEAR_TOL):
            raise DegenerateInput("footprint not strictly convex / not CCW")
        if not self.height > 0:
            raise DegenerateInput(f"non-positive height {self.height}")

    @property
    def z_top(self):
        return self.z_base + self.height

    def area(self):
        return polygon_area(self.vertices)

    def centroid(self):
        return polygon_centroid(self.vertices)


@dataclass
class Plane3:
    """Plane normal . p + offset = 0 with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(self.normal)
        if abs(norm - 1.0) > 1e-9:
            raise DegenerateInput(f"plane normal not unit length ({norm})")

    def signed_distance(self, points):
        return np.asarray(points) @ self.normal + self.offset


@dataclass
class DiscSet:
    """Conservative disc cover used as the planner's smooth collision shape."""

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(self.centers) != len(self.radii):
            raise DegenerateInput("centers/radii length mismatch")
        if np.any(self.radii <= 0):
            raise DegenerateInput("disc radii must be positive")

    def transformed(self, pose):
        return DiscSet(pose.transform(self.centers), self.radii.copy())


@dataclass
class PointCloud:
    """World-frame points with per-point (row, col) pixel provenance."""

    points: np.ndarray
    source_pixel: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.source_pixel = np.asarray(self.source_pixel, dtype=int).reshape(-1, 2)
        if len(self.points) != len(self.source_pixel):
            raise DegenerateInput("points and source_pixel must have equal length")

    def __len__(self):
        return len(self.points)


@dataclass
class OBB2:
    """Oriented rectangle: center, axis angle, half extents (hx >= hy kept as given)."""

    center: np.ndarray
    angle: float
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(2)
        self.angle = float(self.angle)

    def axes(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, s], [-s, c]])  # rows: u, v

    def to_local(self, points):
        return (np.asarray(points) - self.center) @ self.axes().T

    def from_local(self, points):
        return np.asarray(points) @ self.axes() + self.center

    def corners(self):
        hx, hy = self.half_extents
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        return self.from_local(local)

    def contains(self, points, margin=0.0):
        local = np.abs(self.to_local(points))
        return np.all(local <= self.half_extents - margin + 1e-12, axis=-1)

    def area(self):
        return 4.0 * self.half_extents[0] * self.half_extents[1]


# --- polygon primitives ---

def _edge_crosses(vertices):
    nxt = np.roll(vertices, -1, axis=0)
    nxt2 = np.roll(vertices, -2, axis=0)
    e1 = nxt - vertices
    e2 = nxt2 - nxt
    return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]


def polygon_area(vertices):
    v = np.asarray(vertices)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_centroid(vertices):
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if abs(a) < 1e-14:
        return v.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def point_in_convex(vertices, point, margin=0.0):
    """True when point is inside the CCW polygon, allowing ``margin`` slack."""
    v = np.asarray(vertices)
    p = np.asarray(point)
    e = np.roll(v, -1, axis=0) - v
    lengths = np.linalg.norm(e, axis=1)
    rel = p - v
    cross = e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0]
    return bool(np.all(cross >= -margin * lengths - 1e-15))


def point_polygon_distance(vertices, point):
    """0 inside, else euclidean distance to the boundary."""
    v = np.asarray(vertices, dtype=float)
    p = np.asarray(point, dtype=float)
    if point_in_convex(v, p):
        return 0.0
    a = v
    b = np.roll(v, -1, axis=0)
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.min(np.linalg.norm(proj - p, axis=1)))


def caliper_extent(vertices, angle):
    """Footprint extent along the direction ``angle``."""
    u = np.array([math.cos(angle), math.sin(angle)])
    proj = np.asarray(vertices) @ u
    return float(proj.max() - proj.min())


def convex_polygons_intersect(a, b, margin=0.0):
    """Exact separating-axis test for two CCW convex polygons.

    Returns True when the polygons overlap (separation < ``margin``).
    """
    for poly, other in ((a, b), (b, a)):
        v = np.asarray(poly)
        e = np.roll(v, -1, axis=0) - v
        normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        pa = normals @ np.asarray(poly).T
        pb = normals @ np.asarray(other).T
        sep = np.maximum(pb.min(axis=1) - pa.max(axis=1), pa.min(axis=1) - pb.max(axis=1))
        if np.any(sep >= margin):
            return False
    return True


def clip_polygon_halfplane(vertices, normal, offset):
    """Sutherland-Hodgman clip of a convex polygon against n.p <= offset."""
    out = []
    v = list(np.asarray(vertices, dtype=float))
    n = len(v)
    for i in range(n):
        cur, nxt = v[i], v[(i + 1) % n]
        d_cur = np.dot(normal, cur) - offset
        d_nxt = np.dot(normal, nxt) - offset
        if d_cur <= 1e-12:
            out.append(cur)
        if (d_cur < -1e-12 and d_nxt > 1e-12) or (d_cur > 1e-12 and d_nxt < -1e-12):
            t = d_cur / (d_cur - d_nxt)
            out.append(cur + t * (nxt - cur))
    return np.array(out) if out else np.zeros((0, 2))


def polygon_obb_overlap_area(vertices, obb):
    """Area of ``vertices`` clipped to the oriented rectangle."""
    poly = np.asarray(vertices, dtype=float)
    axes = obb.axes()
    for sign in (1.0, -1.0):
        for k in range(2):
            normal = sign * axes[k]
            offset = float(normal @ obb.center) + obb.half_extents[k]
            poly = clip_polygon_halfplane(poly, normal, offset)
            if len(poly) < 3:
                return 0.0
    return polygon_area(poly)


# --- convex hull ---

def convex_hull_2d(points):
    """Minimal CCW convex polygon over ``points``.

    Exact monotone chain, then boundary vertices within COLLINEAR_TOL meters
    of the neighboring chord are dropped (so containment still holds to that
    margin). Raises DegenerateInput for fewer than 3 effective points or an
    all-collinear set.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        raise DegenerateInput("convex hull needs >= 3 points")
    uniq = np.unique(pts, axis=0)
    order = np.lexsort((uniq[:, 1], uniq[:, 0]))
    uniq = uniq[order]
    if len(uniq) < 3:
        raise DegenerateInput("fewer than 3 distinct points")

    def build(seq):
        chain = []
        for p in seq:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0.0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = build(uniq)
    upper = build(uniq[::-1])
    hull = list(lower[:-1] + upper[:-1])
    # drop vertices that sit within tolerance of the chord of their neighbors
    changed = True
    while changed and len(hull) > 2:
        changed = False
        for i in range(len(hull)):
            a = hull[i - 1]
            b = hull[i]
            c = hull[(i + 1) % len(hull)]
            chord = np.linalg.norm(c - a)
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if chord < 1e-15 or cross / chord <= COLLINEAR_TOL:
                del hull[i]
                changed = True
                break
    if len(hull) < 3:
        raise DegenerateInput("points are collinear within tolerance")
    return np.array(hull)


def min_area_obb(points):
    """Minimum-area oriented bounding rectangle via edge-aligned sweep."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    try:
        hull = convex_hull_2d(pts)
    except DegenerateInput:
        # Degenerate input still deserves a box (zero-width rectangle).
        hull = pts
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    best = None
    for ang in angles:
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, s], [-s, c]])
        local = pts @ rot.T
        lo, hi = local.min(axis=0), local.max(axis=0)
        extent = hi - lo
        area = extent[0] * extent[1]
        if best is None or area < best[0] - 1e-15:
            center_local = (lo + hi) / 2.0
            center = center_local @ rot
            best = (area, OBB2(center, ang, extent / 2.0))
    return best[1]


# --- chebyshev center / inradius ---

def chebyshev_center(vertices):
    """Deepest interior point and inradius of a CCW convex polygon."""
    v = np.asarray(vertices, dtype=float)
    e = np.roll(v, -1, axis=0) - v
    inward = np.stack([-e[:, 1], e[:, 0]], axis=1)
    inward /= np.linalg.norm(inward, axis=1, keepdims=True)
    # maximize r subject to inward_i . c - inward_i . v_i >= r
    a_ub = np.hstack([-inward, np.ones((len(v), 1))])
    b_ub = -np.einsum("ij,ij->i", inward, v)
    res = linprog(
        c=[0.0, 0.0, -1.0],
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=[(None, None), (None, None), (0.0, None)],
        method="highs",
    )
    if not res.success:
        raise DegenerateInput("chebyshev center LP failed")
    return res.x[:2].copy(), float(res.x[2])


# --- disc decomposition ---

def disc_decompose(footprint, target_radius):
    """Outer disc cover of a convex footprint.

    Single disc when the circumradius already fits the radius budget
    (inradius + target_radius), else a grid along the footprint's min-area
    box with the fewest rows x columns meeting the budget. Grid end centers
    are pulled inward so box corners sit exactly on the end discs, which
    keeps the cover tight (protrusion R - w instead of R at the ends). Discs
    that cannot touch the polygon are dropped; the union always covers it.
    """
    if not target_radius > 0:
        raise DegenerateInput("target_radius must be positive")
    verts = footprint.vertices if isinstance(footprint, ConvexFootprint) else np.asarray(footprint)
    center, inradius = chebyshev_center(verts)
    budget = inradius + target_radius
    circum = float(np.max(np.linalg.norm(verts - center, axis=1)))
    if circum <= budget + 1e-12:
        return DiscSet(center[None, :], np.array([circum]))

    obb = min_area_obb(verts)
    a, b = float(obb.half_extents[0]), float(obb.half_extents[1])
    angle = obb.angle
    if a < b:
        a, b = b, a
        angle += math.pi / 2.0
    best = None
    for m in range(1, 65):
        hy = b if m == 1 else b / (m - 1)
        if hy >= budget:
            continue
        sx_half = math.sqrt(budget * budget - hy * hy)
        n = max(2, 1 + math.ceil(a / sx_half - 1e-12))
        radius = math.hypot(a / (n - 1), hy)
        count = m * n
        if best is None or count < best[0]:
            best = (count, m, n, radius)
        if m > 2 and best is not None and m * 2 > best[0]:
            break
    _, m, n, radius = best
    wx = a / (n - 1)
    xs = np.linspace(-(a - wx), a - wx, n)
    if m == 1:
        ys = np.array([0.0])
    else:
        wy = b / (m - 1)
        ys = np.linspace(-(b - wy), b - wy, m)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    centers = []
    for y in ys:
        for x in xs:
            p = obb.center + rot @ np.array([x, y])
            if point_polygon_distance(verts, p) <= radius + 1e-12:
                centers.append(p)
    return DiscSet(np.array(centers), np.full(len(centers), radius))


# --- disc set distance ---

@dataclass
class DiscDistance:
    hard: float
    soft: float
    grad_soft: np.ndarray = field(default_factory=lambda: np.zeros(3))


def disc_set_distance(a, b, pose_a=None, temperature=0.01):
    """Signed separation between two disc sets with a smooth soft-min variant.

    ``a`` may be given in a local frame posed by ``pose_a``; the returned
    gradient is of the soft-min w.r.t. (x, y, yaw) of that pose (identity
    pose with pivot at the origin when omitted). Negative values mean
    penetration. soft <= hard always; the gap vanishes as temperature -> 0.
    """
    if len(a.centers) == 0 or len(b.centers) == 0:
        raise DegenerateInput("disc sets must be non-empty")
    if pose_a is None:
        pose_a = Pose2(0.0, 0.0, 0.0)
    local = a.centers
    ca = pose_a.transform(local)
    diff = ca[:, None, :] - b.centers[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    d = dist - a.radii[:, None] - b.radii[None, :]
    hard = float(d.min())

    z = -d / temperature
    zmax = z.max()
    w = np.exp(z - zmax)
    wsum = w.sum()
    soft = float(-temperature * (zmax + math.log(wsum)))
    w /= wsum

    safe = np.where(dist > 1e-12, dist, 1.0)
    u = diff / safe[:, :, None]
    grad_xy = np.einsum("ij,ijk->k", w, u)
    c, s = math.cos(pose_a.yaw), math.sin(pose_a.yaw)
    rot_local = local @ np.array([[c, -s], [s, c]]).T
    dca_dyaw = np.stack([-rot_local[:, 1], rot_local[:, 0]], axis=1)
    grad_yaw = float(np.einsum("ij,ijk,ik->", w, u, dca_dyaw))
    return DiscDistance(hard, soft, np.array([grad_xy[0], grad_xy[1], grad_yaw]))


# --- ray casting ---

def _extrusion_planes(vertices, z_base, z_top):
    """Half-space rows (nx, ny, nz, c) with n.p <= c describing the solid."""
    v = np.asarray(vertices)
    e = np.roll(v, -1, axis=0) - v
    outward = np.stack([e[:, 1], -e[:, 0]], axis=1)
    outward /= np.linalg.norm(outward, axis=1, keepdims=True)
    rows = [np.column_stack([outward, np.zeros(len(v)), np.einsum("ij,ij->i", outward, v)])]
    rows.append(np.array([[0.0, 0.0, 1.0, z_top]]))
    rows.append(np.array([[0.0, 0.0, -1.0, -z_base]]))
    return np.vstack(rows)


def _ray_convex_batch(origin, dirs, planes):
    """Entry distances of rays into an intersection of half-spaces (inf = miss)."""
    n = planes[:, :3]
    c = planes[:, 3]
    denom = dirs @ n.T                      # (K, P)
    num = c - origin @ n.T                  # (P,)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    t_enter = np.where(denom < 0, t, -np.inf)
    t_exit = np.where(denom > 0, t, np.inf)
    # Rays parallel to a plane and outside it never hit.
    outside_parallel = (denom == 0) & (num < 0)
    t_lo = t_enter.max(axis=1)
    t_hi = t_exit.min(axis=1)
    hit = (t_lo <= t_hi + 1e-12) & (t_lo > 1e-12) & ~outside_parallel.any(axis=1)
    return np.where(hit, t_lo, np.inf)


def ray_cast_batch(scene, origin, dirs):
    """Nearest hits for many rays: (distances, ids) with id -1 none, -2 table.

    Among equal distances objects beat the table and lower object ids win.
    """
    origin = np.asarray(origin, dtype=float)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    k = len(dirs)
    best_t = np.full(k, np.inf)
    best_id = np.full(k, -1, dtype=int)
    for idx in range(len(scene.objects) - 1, -1, -1):
        obj = scene.objects[idx]
        verts = scene.world_footprint(idx)
        planes = _extrusion_planes(verts, obj.z_base, obj.z_base + obj.height)
        t = _ray_convex_batch(origin, dirs, planes)
        closer = t <= best_t + 1e-12
        better = t < np.inf
        take = closer & better
        best_t = np.where(take, t, best_t)
        best_id = np.where(take, idx, best_id)
    # table last: objects win ties
    x0, x1, y0, y1 = scene.table_bounds
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_tab = (scene.table_z - origin[2]) / dz
        px = origin[0] + t_tab * dirs[:, 0]
        py = origin[1] + t_tab * dirs[:, 1]
        ok = (dz != 0) & (t_tab > 1e-12) & (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    take = ok & (t_tab < best_t - 1e-12)
    best_t = np.where(take, t_tab, best_t)
    best_id = np.where(take, -2, best_id)
    return best_t, best_id


def ray_cast(scene, origin, direction):
    """Nearest intersection of one ray; returns (distance, id) or None.

    id is an object index or the string 'table'.
    """
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DegenerateInput("ray direction must be unit length")
    t, hid = ray_cast_batch(scene, origin, d[None, :])
    if not np.isfinite(t[0]):
        return None
    ident = "table" if hid[0] == -2 else int(hid[0])
    return float(t[0]), ident


# --- RANSAC plane ---

def ransac_plane(cloud, iterations=256, inlier_tol=0.005, min_inlier_frac=0.3, seed=0):
    """Dominant plane by seeded RANSAC, refit by total least squares on inliers.

    Returns (Plane3 with normal oriented toward +z, sorted inlier indices).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    n = len(pts)
    if n < 3:
        raise DegenerateInput("plane fit needs >= 3 points")
    if not 0 < min_inlier_frac <= 1:
        raise DegenerateInput("min_inlier_frac must be in (0, 1]")
    rng = generator(seed, "ransac")
    best_count = -1
    best_mask = None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = pts[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        offset = -float(normal @ p0)
        dist = np.abs(pts @ normal + offset)
        mask = dist <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count / n < min_inlier_frac:
        raise NoPlaneFound(f"best inlier fraction {max(best_count, 0) / n:.3f} below {min_inlier_frac}")
    inliers = pts[best_mask]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    normal = vt[-1]
    if normal[2] < 0 or (normal[2] == 0 and (normal[1] < 0 or (normal[1] == 0 and normal[0] < 0))):
        normal = -normal
    normal = normal / np.linalg.norm(normal)
    offset = -float(normal @ centroid)
    return Plane3(normal, offset), np.flatnonzero(best_mask)


# --- exact nearest neighbor with a deterministic tie rule ---

class NNIndex:
    """Exact nearest-neighbor index; ties resolved to the lowest point id."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise DegenerateInput("index needs a non-empty (n, d) point set")
        self._tree = cKDTree(self.points)

    def query(self, q):
        q = np.asarray(q, dtype=float)
        d0, _ = self._tree.query(q)
        radius = d0 + 1e-9 * (1.0 + d0)
        cand = self._tree.query_ball_point(q, radius)
        cand = np.asarray(sorted(cand), dtype=int)
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.argmin(dist)  # first occurrence = lowest id
        return int(cand[order]), float(dist[order])


def nn_index_build(points):
    return NNIndex(points)


def nn_query(index, q):
    return index.query(q)

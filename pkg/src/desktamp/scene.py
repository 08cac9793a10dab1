"""Ground-truth world model: table, extruded convex objects, arm, camera.

The scene is the simulator's authority; the planner only ever sees the
belief reconstructed from a rendered observation.
"""

import copy as _copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError, UnknownEntity
from .geom import ConvexFootprint, Pose2, min_area_obb, point_in_convex, polygon_centroid
from .motion import ArmModel

TABLE = "table"


@dataclass
class MarkedRegion:
    """Rectangle on an object's top face (object-local frame) to be wiped."""

    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(2)


@dataclass
class SceneObject:
    name: str
    footprint_local: np.ndarray
    height: float
    pose: Pose2
    z_base: float = 0.0
    color: str = ""
    category: str = ""
    is_eraser: bool = False
    marked_region: MarkedRegion = None

    def __post_init__(self):
        self.footprint_local = np.asarray(self.footprint_local, dtype=float)
        ConvexFootprint(self.footprint_local, self.height)  # validation only

    def world_vertices(self):
        return self.pose.transform(self.footprint_local)

    @property
    def z_top(self):
        return self.z_base + self.height

    def world_centroid(self):
        return polygon_centroid(self.world_vertices())


class WipeGrid:
    """1 mm occupancy grid over a marked region, stamped during execution."""

    def __init__(self, region_obb, cell=0.001):
        self.region = region_obb
        self.cell = cell
        hx, hy = region_obb.half_extents
        xs = np.arange(-hx + cell / 2.0, hx, cell)
        ys = np.arange(-hy + cell / 2.0, hy, cell)
        gx, gy = np.meshgrid(xs, ys)
        local = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.points = region_obb.from_local(local)
        self.covered = np.zeros(len(self.points), dtype=bool)

    def stamp_polygon(self, vertices):
        v = np.asarray(vertices)
        e = np.roll(v, -1, axis=0) - v
        rel = self.points[:, None, :] - v[None, :, :]
        cross = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
        inside = np.all(cross >= -1e-12, axis=1)
        self.covered |= inside

    def coverage(self):
        return float(self.covered.mean()) if len(self.covered) else 0.0


@dataclass
class Scene:
    objects: list
    table_bounds: tuple  # (x0, x1, y0, y1)
    arm: ArmModel = field(default_factory=ArmModel)
    camera: object = None
    table_z: float = 0.0
    seed: int = 0
    instruction: str = ""
    rubric: list = field(default_factory=list)
    name: str = "scene"
    wipe_state: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise InvariantError("objects", "duplicate object names")

    def world_footprint(self, idx):
        return self.objects[idx].world_vertices()

    def index_of(self, name):
        for i, obj in enumerate(self.objects):
            if obj.name == name:
                return i
        raise UnknownEntity(f"no scene object named {name!r}")

    def names(self):
        return [o.name for o in self.objects]

    def copy(self):
        new = Scene(
            objects=[_copy.deepcopy(o) for o in self.objects],
            table_bounds=tuple(self.table_bounds),
            arm=self.arm,
            camera=self.camera,
            table_z=self.table_z,
            seed=self.seed,
            instruction=self.instruction,
            rubric=list(self.rubric),
            name=self.name,
        )
        new.wipe_state = {k: _copy.deepcopy(v) for k, v in self.wipe_state.items()}
        return new

    def top_obb(self, name):
        """Oriented rectangle of a support's top face (or the table)."""
        if name == TABLE:
            x0, x1, y0, y1 = self.table_bounds
            from .geom import OBB2

            return OBB2(
                np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0]),
                0.0,
                np.array([(x1 - x0) / 2.0, (y1 - y0) / 2.0]),
            )
        idx = self.index_of(name)
        return min_area_obb(self.objects[idx].world_vertices())

    def top_height(self, name):
        if name == TABLE:
            return self.table_z
        return self.objects[self.index_of(name)].z_top

    def support_below(self, point_xy, exclude_name=None):
        """(support name, top z) the highest surface under a dropped centroid."""
        best = (TABLE, self.table_z)
        for obj in self.objects:
            if obj.name == exclude_name:
                continue
            if point_in_convex(obj.world_vertices(), point_xy):
                if obj.z_top > best[1]:
                    best = (obj.name, obj.z_top)
        return best

    def wipe_grid(self, name):
        """Lazily build the 1 mm grid for an object's marked region."""
        if name not in self.wipe_state:
            obj = self.objects[self.index_of(name)]
            if obj.marked_region is None:
                raise UnknownEntity(f"{name!r} has no marked region")
            region = obj.marked_region
            from .geom import OBB2

            center = obj.pose.transform(region.center[None, :])[0]
            self.wipe_state[name] = WipeGrid(
                OBB2(center, obj.pose.yaw + region.yaw, region.half_extents)
            )
        return self.wipe_state[name]

    def marked_names(self):
        return [o.name for o in self.objects if o.marked_region is not None]

    def attributes(self):
        """Ground-truth attributes exposed to the builtin grounder."""
        out = {}
        for obj in self.objects:
            out[obj.name] = {
                "color": obj.color,
                "area": ConvexFootprint(obj.footprint_local, obj.height).area(),
                "category": obj.category,
                "is_eraser": obj.is_eraser,
            }
        return out

import math

import numpy as np
import pytest

from desktamp.geom import Pose2
from desktamp.motion import ArmModel
from desktamp.percept import CameraModel, camera_look_at
from desktamp.scene import Scene, SceneObject


def box(w, h):
    """CCW rectangle footprint centered at the origin."""
    return np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])


def ngon(radius, n=16):
    ang = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


@pytest.fixture
def simple_scene():
    """Box + tray on a table, camera looking down at an angle."""
    objects = [
        SceneObject("crackers", box(0.04, 0.06), 0.05, Pose2(0.32, -0.10, 0.2),
                    color="red", category="snack"),
        SceneObject("tray", box(0.16, 0.12), 0.012, Pose2(0.42, 0.14, 0.0),
                    color="white", category="tray"),
    ]
    cam = camera_look_at([0.05, 0.0, 0.8], [0.38, 0.0, 0.0], fx=190.0, width=160, height=120)
    return Scene(objects, table_bounds=(0.14, 0.62, -0.30, 0.30), arm=ArmModel(), camera=cam)


def make_scene(objects, camera=None, **kw):
    cam = camera or camera_look_at([0.05, 0.0, 0.8], [0.38, 0.0, 0.0],
                                   fx=140.0, width=160, height=120)
    kw.setdefault("table_bounds", (0.14, 0.62, -0.30, 0.30))
    return Scene(objects, arm=ArmModel(), camera=cam, **kw)


def synthetic_belief(scene, gripper=None):
    """Belief built straight from ground truth (no rendering): exact hulls,
    disc covers, collision-filtered grasps. Fast path for planner tests."""
    from desktamp.geom import ConvexFootprint, OBB2, Plane3, disc_decompose
    from desktamp.percept import BeliefObject, GripperSpec, SceneBelief, sample_grasps

    gripper = gripper or GripperSpec()
    objects = {}
    for idx, obj in enumerate(scene.objects):
        hull = ConvexFootprint(obj.world_vertices(), obj.height, obj.z_base)
        objects[idx] = BeliefObject(idx, obj.name, hull, disc_decompose(hull, 0.01))
    for cand in sample_grasps(objects, gripper):
        objects[cand.object_id].grasps.append(cand)
    x0, x1, y0, y1 = scene.table_bounds
    workspace = OBB2([(x0 + x1) / 2, (y0 + y1) / 2], 0.0,
                     [(x1 - x0) / 2, (y1 - y0) / 2])
    surfaces = {idx: o.top_obb for idx, o in objects.items()}
    return SceneBelief(Plane3([0.0, 0.0, 1.0], -scene.table_z), workspace,
                       objects, surfaces)

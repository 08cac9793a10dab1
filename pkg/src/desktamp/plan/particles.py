"""Particle batches over a skeleton's continuous slots and their batched
differentiable costs (collision, containment, reachability, stability).

Variables are packed per particle as [placements (x, y, yaw) ..., configs
(q1, q2, q3) ...]. Grasp choices are discrete per particle and frozen
during optimization. Every geometric cost is evaluated through a pose
chain, so gradients flow both to the slot being placed and to any earlier
placement that moved an obstacle.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateInput, NoGraspSource, Unreachable
from ..geom import (
    OBB2,
    Pose2,
    convex_polygons_intersect,
    polygon_area,
    polygon_obb_overlap_area,
    wrap_angle,
)
from ..motion import fk_batch, ik, jacobian_batch
from ..percept import sample_grasps
from ..rng import generator
from ..scene import TABLE
from .symbolic import MOVE_FREE, MOVE_HOLDING, PICK, PLACE, WIPE


@dataclass
class CostSpec:
    """Cost weights/thresholds. Satisfaction uses ``thresholds``; the descent
    objective hinges reachability at zero so the configuration keeps tracking
    a moving placement even once the residual is under tolerance."""

    weights: dict = field(default_factory=lambda: {
        "collision": 1.0, "containment": 1.0, "reachability": 1.0, "stability": 0.5,
    })
    thresholds: dict = field(default_factory=lambda: {
        "collision": 0.0, "containment": 0.0, "reachability": 1e-3, "stability": 0.0,
    })
    soft_temperature: float = 0.01
    margin_temperature: float = 0.005
    stability_temperature: float = 0.005
    yaw_metric: float = 0.1
    support_fraction: float = 0.9
    edge_margin: float = 0.008  # keep placements away from surface edges
    wipe_margin: float = 0.010  # inflate the localized wipe region

    def threshold(self, kind, collision_relax=0.0):
        """Satisfaction threshold; the relax applies to the disc-geometry
        terms (collision and containment) whose conservatism the exact
        polygon re-check is allowed to override."""
        thr = self.thresholds[kind]
        if kind in ("collision", "containment"):
            return thr + collision_relax
        return thr

    def objective_threshold(self, kind, collision_relax=0.0):
        if kind == "reachability":
            return 0.0
        return self.threshold(kind, collision_relax)


# --- pose chains ---

class PoseChain:
    """Composition of pose elements; supports gradients through slot poses.

    Elements: ('const', (3,) array), ('slot', var offset), ('grasp', pick key).
    """

    def __init__(self, elements):
        self.elements = list(elements)

    def bind(self, x, batch, rows=None):
        n = len(x)
        pose = np.zeros((n, 3))
        slot_info = []
        for elem in self.elements:
            kind = elem[0]
            if kind == "const":
                nxt = np.broadcast_to(np.asarray(elem[1], dtype=float), (n, 3))
            elif kind == "slot":
                nxt = x[:, elem[1] : elem[1] + 3]
            else:
                full = batch.grasp_locals[elem[1]]
                nxt = full if rows is None else full[rows]
            if kind == "slot":
                slot_info.append((elem[1], pose[:, 2].copy(), None))
            c, s = np.cos(pose[:, 2]), np.sin(pose[:, 2])
            out = np.empty((n, 3))
            out[:, 0] = pose[:, 0] + c * nxt[:, 0] - s * nxt[:, 1]
            out[:, 1] = pose[:, 1] + s * nxt[:, 0] + c * nxt[:, 1]
            out[:, 2] = pose[:, 2] + nxt[:, 2]
            if kind == "slot":
                # frame origin of the slot in the world
                slot_info[-1] = (elem[1], slot_info[-1][1], out[:, :2].copy())
            pose = out
        return _BoundChain(pose, slot_info)

    def has_slots(self):
        return any(e[0] == "slot" for e in self.elements)


class _BoundChain:
    def __init__(self, pose, slot_info):
        self.pose = pose  # (N, 3)
        self.slot_info = slot_info  # [(ofs, pre_yaw (N,), origin (N, 2))]

    def transform(self, local):
        """local (m, 2) or (N, m, 2) -> world (N, m, 2)."""
        local = np.asarray(local, dtype=float)
        if local.ndim == 2:
            local = np.broadcast_to(local, (len(self.pose),) + local.shape)
        c, s = np.cos(self.pose[:, 2]), np.sin(self.pose[:, 2])
        wx = c[:, None] * local[:, :, 0] - s[:, None] * local[:, :, 1] + self.pose[:, 0:1]
        wy = s[:, None] * local[:, :, 0] + c[:, None] * local[:, :, 1] + self.pose[:, 1:2]
        return np.stack([wx, wy], axis=2)

    def accumulate_point_grad(self, world_points, dl_dp, grads):
        """Chain rule from dL/d(world points) (N, m, 2) into slot columns."""
        for ofs, pre_yaw, origin in self.slot_info:
            c, s = np.cos(pre_yaw), np.sin(pre_yaw)
            grads[:, ofs] += dl_dp[:, :, 0].sum(axis=1) * c + dl_dp[:, :, 1].sum(axis=1) * s
            grads[:, ofs + 1] += -dl_dp[:, :, 0].sum(axis=1) * s + dl_dp[:, :, 1].sum(axis=1) * c
            rel = world_points - origin[:, None, :]
            grads[:, ofs + 2] += (
                -dl_dp[:, :, 0] * rel[:, :, 1] + dl_dp[:, :, 1] * rel[:, :, 0]
            ).sum(axis=1)

    def accumulate_pose_grad(self, dl_dpose, grads):
        """Chain rule from dL/d(world pose) (N, 3) into slot columns."""
        pos = self.pose[:, :2][:, None, :]
        self.accumulate_point_grad(pos, dl_dpose[:, None, :2], grads)
        for ofs, _, _ in self.slot_info:
            grads[:, ofs + 2] += dl_dpose[:, 2]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _obb_margins(points, obb, temp):
    """Smooth inside-margins of world points w.r.t. an oriented rectangle.

    Returns (margin (N, m), d margin / d point (N, m, 2)); margin is the
    soft minimum of the two axis margins, <= the true margin.
    """
    axes = obb.axes()
    rel = points - obb.center
    lx = rel[:, :, 0] * axes[0, 0] + rel[:, :, 1] * axes[0, 1]
    ly = rel[:, :, 0] * axes[1, 0] + rel[:, :, 1] * axes[1, 1]
    mx = obb.half_extents[0] - np.abs(lx)
    my = obb.half_extents[1] - np.abs(ly)
    margin = -temp * np.logaddexp(-mx / temp, -my / temp)
    wx = _sigmoid((my - mx) / temp)
    dm_dx = -np.sign(lx) * wx
    dm_dy = -np.sign(ly) * (1.0 - wx)
    dpoint = (
        dm_dx[:, :, None] * axes[0][None, None, :]
        + dm_dy[:, :, None] * axes[1][None, None, :]
    )
    return margin, dpoint


class CollisionTerm:
    """Negated soft-min disc separation between two posed disc clouds."""

    kind = "collision"

    def __init__(self, chain_a, discs_a, radii_a, chain_b, discs_b, radii_b, temp, label):
        self.chain_a = chain_a
        self.discs_a = discs_a  # (m, 2) or key into batch finger cache
        self.radii_a = radii_a
        self.chain_b = chain_b
        self.discs_b = discs_b
        self.radii_b = radii_b
        self.temp = temp
        self.label = label

    def _locals(self, discs, batch, rows):
        if isinstance(discs, str):
            full = batch.finger_locals[discs]
            return full if rows is None else full[rows]
        return discs

    def value(self, x, batch, need_grad=False, rows=None):
        ba = self.chain_a.bind(x, batch, rows)
        bb = self.chain_b.bind(x, batch, rows)
        ca = ba.transform(self._locals(self.discs_a, batch, rows))
        cb = bb.transform(self._locals(self.discs_b, batch, rows))
        diff = ca[:, :, None, :] - cb[:, None, :, :]
        dist = np.linalg.norm(diff, axis=3)
        d = dist - np.asarray(self.radii_a)[None, :, None] - np.asarray(self.radii_b)[None, None, :]
        z = -d / self.temp
        zmax = z.max(axis=(1, 2), keepdims=True)
        w = np.exp(z - zmax)
        wsum = w.sum(axis=(1, 2), keepdims=True)
        val = -(-self.temp * (zmax[:, 0, 0] + np.log(wsum[:, 0, 0])))
        if not need_grad:
            return val, None
        w = w / wsum
        safe = np.where(dist > 1e-12, dist, 1.0)
        u = diff / safe[..., None]
        # value = -softmin, d softmin / d d_ij = +w_ij, d d_ij / d ca_i = u_ij
        dl_dca = -(w[..., None] * u).sum(axis=2)
        dl_dcb = (w[..., None] * u).sum(axis=1)
        return val, [(ba, ca, dl_dca), (bb, cb, dl_dcb)]


class ContainmentTerm:
    """Worst disc protrusion (soft-max) past the placement rectangle's
    edge-margin band."""

    kind = "containment"

    def __init__(self, chain, discs_local, radii, region, temp, label, edge_margin=0.0):
        self.chain = chain
        self.discs_local = discs_local
        self.radii = np.asarray(radii)
        self.region = region
        self.temp = temp
        self.label = label
        self.edge_margin = edge_margin

    def value(self, x, batch, need_grad=False, rows=None):
        bound = self.chain.bind(x, batch, rows)
        centers = bound.transform(self.discs_local)
        margin, dpoint = _obb_margins(centers, self.region, self.temp)
        v = self.radii[None, :] + self.edge_margin - margin
        z = v / self.temp
        zmax = z.max(axis=1, keepdims=True)
        w = np.exp(z - zmax)
        wsum = w.sum(axis=1, keepdims=True)
        val = self.temp * (zmax[:, 0] + np.log(wsum[:, 0]))
        if not need_grad:
            return val, None
        w = w / wsum
        dl_dc = -(w[:, :, None] * dpoint)
        return val, [(bound, centers, dl_dc)]


class ReachTerm:
    """Weighted pose residual between fk(q) and a (possibly moving) target."""

    kind = "reachability"

    def __init__(self, conf_ofs, target_chain, arm, beta, label):
        self.conf_ofs = conf_ofs
        self.target_chain = target_chain
        self.arm = arm
        self.beta = beta
        self.label = label

    def value(self, x, batch, need_grad=False, rows=None):
        q = x[:, self.conf_ofs : self.conf_ofs + 3]
        ee = fk_batch(self.arm, q)
        bound = self.target_chain.bind(x, batch, rows)
        target = bound.pose
        dx = ee[:, 0] - target[:, 0]
        dy = ee[:, 1] - target[:, 1]
        dyaw = wrap_angle(ee[:, 2] - target[:, 2])
        r = np.sqrt(dx * dx + dy * dy + self.beta**2 * dyaw * dyaw)
        if not need_grad:
            return r, None
        jac = jacobian_batch(self.arm, q)
        safe = np.where(r > 1e-12, r, 1.0)
        gq = (
            dx[:, None] * jac[:, 0, :]
            + dy[:, None] * jac[:, 1, :]
            + (self.beta**2) * dyaw[:, None] * jac[:, 2, :]
        ) / safe[:, None]
        gq = np.where(r[:, None] > 1e-12, gq, 0.0)
        dl_dpose = -np.stack([dx, dy, self.beta**2 * dyaw], axis=1) / safe[:, None]
        dl_dpose = np.where(r[:, None] > 1e-12, dl_dpose, 0.0)
        return r, [("config", self.conf_ofs, gq), (bound, None, dl_dpose)]


class StabilityTerm:
    """Required support fraction minus the smoothed inside fraction."""

    kind = "stability"

    def __init__(self, chain, sample_local, support, temp, required, label):
        self.chain = chain
        self.sample_local = sample_local
        self.support = support
        self.temp = temp
        self.required = required
        self.label = label

    def value(self, x, batch, need_grad=False, rows=None):
        bound = self.chain.bind(x, batch, rows)
        pts = bound.transform(self.sample_local)
        margin, dpoint = _obb_margins(pts, self.support, self.temp)
        sig = 1.0 / (1.0 + np.exp(-margin / self.temp))
        val = self.required - sig.mean(axis=1)
        if not need_grad:
            return val, None
        dsig = sig * (1.0 - sig) / self.temp
        dl_dmargin = -dsig / sig.shape[1]
        dl_dp = dl_dmargin[:, :, None] * dpoint
        return val, [(bound, pts, dl_dp)]


# --- program compilation ---

@dataclass
class PlacementSlot:
    action_idx: int
    obj: str
    surface: str
    region: OBB2
    bounds: OBB2
    z_base: float
    ofs: int


@dataclass
class ConfigSlot:
    action_idx: int
    kind: str  # pick | place | wipe
    target_chain: PoseChain
    ofs: int


@dataclass
class PickInfo:
    action_idx: int
    obj: str
    candidates: list  # [(local pose (3,), width)]


@dataclass
class MoveInfo:
    action_idx: int
    kind: str  # free | holding
    held: str
    grasp_key: int  # pick action index, -1 when free
    to_conf: int  # config slot index
    obstacles: list  # [(label, pose elements, z_lo, z_hi)]
    carry_z: tuple = None


class SkeletonProgram:
    """A skeleton compiled against a belief: slots, costs, motion framing."""

    def __init__(self, skeleton, belief, gripper, arm, spec):
        self.skeleton = skeleton
        self.belief = belief
        self.gripper = gripper
        self.arm = arm
        self.spec = spec
        self.by_label = {obj.label: obj for obj in belief.objects.values()}
        self.placements = []
        self.configs = []
        self.picks = {}
        self.moves = []
        self.terms = []
        self.wipe_strokes = {}
        self._compile()

    # -- helpers --

    def _surface_top(self, key):
        if key == TABLE:
            from ..percept import plane_height_at

            return plane_height_at(self.belief.table, self.belief.workspace.center)
        return self.by_label[key].hull.z_top

    def _region(self, key):
        if key == TABLE:
            return self.belief.workspace
        return self.by_label[key].top_obb

    def _grasp_candidates(self, label):
        obj = self.by_label[label]
        cands = obj.grasps
        if not cands:
            cands = sample_grasps({obj.object_id: obj}, self.gripper,
                                  n_per_object=8, check_collisions=False)
        if not cands:
            raise NoGraspSource(label)
        out = []
        for cand in cands:
            local = obj.grasp_local(cand)
            out.append((np.array([local.x, local.y, local.yaw]), cand.width))
        return out

    def _compile(self):
        spec = self.spec
        pose_ref = {}
        z_int = {}
        for label, obj in self.by_label.items():
            pose_ref[label] = ("const", obj.init_pose.as_array())
            z_int[label] = (obj.hull.z_base, obj.hull.z_top)
        support = {}
        for label, obj in self.by_label.items():
            support[label] = TABLE
            for other_label, other in self.by_label.items():
                if other_label == label:
                    continue
                if abs(obj.hull.z_base - other.hull.z_top) < 0.005:
                    support[label] = other_label
        held = None
        held_pick = -1
        var = 0

        def snapshot(exclude):
            return [
                (lab, pose_ref[lab], z_int[lab][0], z_int[lab][1])
                for lab in sorted(self.by_label)
                if lab != exclude
            ]

        actions = self.skeleton.actions
        for idx, action in enumerate(actions):
            if action.name == MOVE_FREE:
                nxt = actions[idx + 1]
                self.moves.append(
                    MoveInfo(idx, "free", None, -1, len(self.configs), snapshot(nxt.params[0]))
                )
            elif action.name == MOVE_HOLDING:
                obj = action.params[0]
                lift = z_int[obj][1] - z_int[obj][0]
                nxt = actions[idx + 1]
                dest_top = self._surface_top(
                    nxt.params[3] if nxt.name == PLACE else nxt.params[1]
                )
                base = max(self._surface_top(support[obj]), dest_top) + 0.03
                self.moves.append(
                    MoveInfo(idx, "holding", obj, held_pick, len(self.configs),
                             snapshot(obj), carry_z=(base, base + lift))
                )
            elif action.name == PICK:
                obj = action.params[0]
                self.picks[idx] = PickInfo(idx, obj, self._grasp_candidates(obj))
                grasp_chain = PoseChain([pose_ref[obj], ("grasp", idx)])
                conf_ofs = None  # assigned below with the slot
                conf = ConfigSlot(idx, "pick", grasp_chain, -1)
                self.configs.append(conf)
                held = obj
                held_pick = idx
            elif action.name == PLACE:
                obj, _, _, surf, _ = action.params
                region = self._region(surf)
                bobj = self.by_label[obj]
                shrink = np.maximum(
                    region.half_extents - bobj.circumradius - spec.edge_margin, 1e-4
                )
                bounds = OBB2(region.center.copy(), region.angle, shrink)
                slot = PlacementSlot(idx, obj, surf, region, bounds,
                                     self._surface_top(surf), -1)
                self.placements.append(slot)
                conf_chain = PoseChain([("slot_pending", len(self.placements) - 1),
                                        ("grasp", held_pick)])
                self.configs.append(ConfigSlot(idx, "place", conf_chain, -1))
                pose_ref[obj] = ("slot_pending", len(self.placements) - 1)
                top = self._surface_top(surf)
                z_int[obj] = (top, top + (z_int[obj][1] - z_int[obj][0]))
                support[obj] = surf
                held = None
            elif action.name == WIPE:
                eraser, surf, _ = action.params
                strokes = self._wipe_strokes(eraser, surf)
                self.wipe_strokes[idx] = strokes
                first = strokes[0]
                target = PoseChain([
                    ("const", np.array([first.x, first.y, first.yaw])),
                    ("grasp", held_pick),
                ])
                self.configs.append(ConfigSlot(idx, "wipe", target, -1))
        del held

        # assign variable offsets: placements first, then configs
        for slot in self.placements:
            slot.ofs = var
            var += 3
        for slot in self.configs:
            slot.ofs = var
            var += 3
        self.n_vars = var

        # resolve pending slot references now that offsets exist
        def fix(chain):
            elems = []
            for e in chain.elements:
                if e[0] == "slot_pending":
                    elems.append(("slot", self.placements[e[1]].ofs))
                else:
                    elems.append(e)
            return PoseChain(elems)

        for conf in self.configs:
            conf.target_chain = fix(conf.target_chain)
        for move in self.moves:
            move.obstacles = [
                (lab, ("slot", self.placements[ref[1]].ofs) if ref[0] == "slot_pending" else ref,
                 zlo, zhi)
                for lab, ref, zlo, zhi in move.obstacles
            ]

        self._build_terms(fix)

    def _wipe_strokes(self, eraser, surf):
        from ..execution import generate_wipe_strokes

        region = self.belief.wipe_regions.get(surf)
        if region is None:
            region = self._region(surf)
        # wipe a little past the detected region: localization is approximate
        region = OBB2(region.center.copy(), region.angle,
                      region.half_extents + self.spec.wipe_margin)
        verts = self.by_label[eraser].local_vertices
        return generate_wipe_strokes(region, verts, overlap=0.25)

    def _pick_for(self, place_idx):
        """Index of the Pick action whose grasp is active at ``place_idx``."""
        latest = -1
        for idx, action in enumerate(self.skeleton.actions):
            if idx >= place_idx:
                break
            if action.name == PICK:
                latest = idx
        return latest

    def _build_terms(self, fix):
        spec = self.spec
        arm = self.arm
        pose_ref = {lab: ("const", obj.init_pose.as_array())
                    for lab, obj in self.by_label.items()}
        z_int = {lab: (obj.hull.z_base, obj.hull.z_top)
                 for lab, obj in self.by_label.items()}
        conf_iter = iter(self.configs)
        place_iter = iter(self.placements)
        self.finger_specs = {}

        def z_overlap(a, b):
            return min(a[1], b[1]) - max(a[0], b[0]) > 1e-9

        def others(exclude, ref_z):
            for lab in sorted(self.by_label):
                if lab == exclude:
                    continue
                if not z_overlap(z_int[lab], ref_z):
                    continue
                obj = self.by_label[lab]
                yield lab, PoseChain([fix_ref(pose_ref[lab])]), obj.discs_local

        def fix_ref(ref):
            if ref[0] == "slot_pending":
                return ("slot", self.placements[ref[1]].ofs)
            return ref

        for idx, action in enumerate(self.skeleton.actions):
            if action.name == PICK:
                obj = action.params[0]
                conf = next(conf_iter)
                self.terms.append(ReachTerm(conf.ofs, conf.target_chain, arm,
                                            spec.yaw_metric, f"reach[{idx}]{obj}"))
                finger_key = f"fingers[{idx}]"
                self.finger_specs[finger_key] = idx
                gchain = fix(PoseChain([pose_ref[obj], ("grasp", idx)]))
                radii = np.full(2, self.gripper.finger_radius)
                for lab, chain, discs in others(obj, z_int[obj]):
                    self.terms.append(CollisionTerm(
                        gchain, finger_key, radii, chain, discs.centers, discs.radii,
                        spec.soft_temperature, f"fingers[{idx}]{obj}-vs-{lab}"))
            elif action.name == PLACE:
                obj = action.params[0]
                slot = next(place_iter)
                conf = next(conf_iter)
                bobj = self.by_label[obj]
                place_chain = PoseChain([("slot", slot.ofs)])
                new_z = (slot.z_base, slot.z_base + (z_int[obj][1] - z_int[obj][0]))
                self.terms.append(ReachTerm(conf.ofs, conf.target_chain, arm,
                                            spec.yaw_metric, f"reach[{idx}]{obj}"))
                self.terms.append(ContainmentTerm(
                    place_chain, bobj.discs_local.centers, bobj.discs_local.radii,
                    slot.region, spec.margin_temperature, f"contain[{idx}]{obj}",
                    edge_margin=spec.edge_margin))
                self.terms.append(StabilityTerm(
                    place_chain, bobj.sample_points_local(), slot.region,
                    spec.stability_temperature, spec.support_fraction,
                    f"stable[{idx}]{obj}"))
                surf = action.params[3]
                pick_idx = self._pick_for(idx)
                finger_key = f"fingers[{pick_idx}]"
                finger_chain = PoseChain([("slot", slot.ofs), ("grasp", pick_idx)])
                radii = np.full(2, self.gripper.finger_radius)
                for lab, chain, discs in others(obj, new_z):
                    if lab == surf:
                        continue
                    self.terms.append(CollisionTerm(
                        place_chain, bobj.discs_local.centers, bobj.discs_local.radii,
                        chain, discs.centers, discs.radii, spec.soft_temperature,
                        f"collide[{idx}]{obj}-vs-{lab}"))
                    self.terms.append(CollisionTerm(
                        finger_chain, finger_key, radii, chain, discs.centers,
                        discs.radii, spec.soft_temperature,
                        f"fingers[{idx}]{obj}-vs-{lab}"))
                pose_ref[obj] = ("slot_pending", self.placements.index(slot))
                z_int[obj] = new_z
            elif action.name == WIPE:
                conf = next(conf_iter)
                self.terms.append(ReachTerm(conf.ofs, conf.target_chain, arm,
                                            spec.yaw_metric, f"reach[{idx}]wipe"))

    # -- evaluation --

    def term_is_constant(self, term):
        """True when the term cannot change during optimization (all chains
        slot-free; per-particle grasp data is frozen)."""
        chains = []
        if hasattr(term, "chain"):
            chains.append(term.chain)
        if hasattr(term, "chain_a"):
            chains.extend([term.chain_a, term.chain_b])
        if hasattr(term, "target_chain"):
            return False  # reach always depends on a configuration slot
        return chains != [] and not any(c.has_slots() for c in chains)

    def evaluate(self, x, batch, need_grad=False, rows=None):
        n = len(x)
        costs = np.zeros((n, len(self.terms)))
        grads = [] if need_grad else None
        for t_idx, term in enumerate(self.terms):
            cached = batch.const_cache.get(t_idx)
            if cached is not None:
                costs[:, t_idx] = cached if rows is None else cached[rows]
                if need_grad:
                    grads.append([])  # constant term: zero gradient
                continue
            val, grad_parts = term.value(x, batch, need_grad, rows)
            costs[:, t_idx] = val
            if need_grad:
                grads.append(grad_parts)
            if rows is None and self.term_is_constant(term):
                batch.const_cache[t_idx] = val.copy()
        return costs, grads

    def total_violation(self, costs, collision_relax=0.0):
        """Descent objective: weighted hinge sum (reachability hinges at 0)."""
        viol = np.zeros(len(costs))
        for t_idx, term in enumerate(self.terms):
            thr = self.spec.objective_threshold(term.kind, collision_relax)
            w = self.spec.weights[term.kind]
            viol += w * np.maximum(0.0, costs[:, t_idx] - thr)
        return viol

    def satisfied(self, costs, collision_relax=0.0):
        ok = np.ones(len(costs), dtype=bool)
        for t_idx, term in enumerate(self.terms):
            thr = self.spec.threshold(term.kind, collision_relax)
            ok &= costs[:, t_idx] <= thr + 1e-12
        return ok

    def violation_gradient(self, x, batch, collision_relax=0.0, rows=None):
        costs, grads = self.evaluate(x, batch, need_grad=True, rows=rows)
        out = np.zeros_like(x)
        for t_idx, term in enumerate(self.terms):
            thr = self.spec.objective_threshold(term.kind, collision_relax)
            w = self.spec.weights[term.kind]
            active = (costs[:, t_idx] > thr).astype(float) * w
            if not np.any(active):
                continue
            for part in grads[t_idx]:
                if part[0] == "config":
                    _, ofs, gq = part
                    out[:, ofs : ofs + 3] += active[:, None] * gq
                else:
                    bound, points, dl = part
                    if dl.ndim == 3:
                        bound.accumulate_point_grad(points, active[:, None, None] * dl, out)
                    else:
                        bound.accumulate_pose_grad(active[:, None] * dl, out)
        return costs, out

    def project(self, x):
        out = x.copy()
        for slot in self.placements:
            xy = out[:, slot.ofs : slot.ofs + 2]
            local = slot.bounds.to_local(xy)
            np.clip(local, -slot.bounds.half_extents, slot.bounds.half_extents, out=local)
            out[:, slot.ofs : slot.ofs + 2] = slot.bounds.from_local(local)
            out[:, slot.ofs + 2] = wrap_angle(out[:, slot.ofs + 2])
        lo, hi = self.arm.limits_lo(), self.arm.limits_hi()
        for conf in self.configs:
            np.clip(out[:, conf.ofs : conf.ofs + 3], lo, hi,
                    out=out[:, conf.ofs : conf.ofs + 3])
        return out


def compile_skeleton(skeleton, belief, gripper, arm, spec=None):
    return SkeletonProgram(skeleton, belief, gripper, arm, spec or CostSpec())


# --- particle batches ---

@dataclass
class ParticleBatch:
    program: SkeletonProgram
    n: int
    x: np.ndarray
    grasp_choice: dict  # pick action idx -> (N,) candidate index
    grasp_locals: dict  # pick action idx -> (N, 3)
    grasp_widths: dict  # pick action idx -> (N,)
    costs: np.ndarray = None
    satisfied: np.ndarray = None

    def __post_init__(self):
        self.finger_locals = {}
        self.const_cache = {}
        for key, pick_idx in self.program.finger_specs.items():
            half = self.grasp_widths[pick_idx] / 2.0 + self.program.gripper.finger_radius
            locs = np.zeros((self.n, 2, 2))
            locs[:, 0, 0] = half
            locs[:, 1, 0] = -half
            self.finger_locals[key] = locs

    def refresh(self, collision_relax=0.0):
        self.costs, _ = self.program.evaluate(self.x, self)
        self.satisfied = self.program.satisfied(self.costs, collision_relax)
        return self

    def total_violation(self, collision_relax=0.0):
        return self.program.total_violation(self.costs, collision_relax)

    def clone(self):
        out = ParticleBatch(
            self.program, self.n, self.x.copy(),
            {k: v.copy() for k, v in self.grasp_choice.items()},
            {k: v.copy() for k, v in self.grasp_locals.items()},
            {k: v.copy() for k, v in self.grasp_widths.items()},
            None if self.costs is None else self.costs.copy(),
            None if self.satisfied is None else self.satisfied.copy(),
        )
        out.const_cache = self.const_cache  # grasp data is frozen: values hold
        return out


def init_particles(program, n, seed):
    """Sample all non-trajectory slots: grasps uniform over candidates,
    placements uniform over the shrunk target rectangle, configurations by
    inverse kinematics (random branch). IK misses keep their natural large
    reach residual instead of being discarded."""
    if n < 1:
        raise DegenerateInput("need at least one particle")
    rng = generator(seed, "init")
    x = np.zeros((n, program.n_vars))
    grasp_choice, grasp_locals, grasp_widths = {}, {}, {}
    for idx in sorted(program.picks):
        info = program.picks[idx]
        choice = rng.integers(0, len(info.candidates), size=n)
        locals_arr = np.stack([info.candidates[c][0] for c in choice])
        widths = np.array([info.candidates[c][1] for c in choice])
        grasp_choice[idx] = choice
        grasp_locals[idx] = locals_arr
        grasp_widths[idx] = widths
    for slot in program.placements:
        local = (rng.random((n, 2)) * 2.0 - 1.0) * slot.bounds.half_extents
        world = slot.bounds.from_local(local)
        yaw = rng.random(n) * 2.0 * math.pi - math.pi
        x[:, slot.ofs : slot.ofs + 2] = world
        x[:, slot.ofs + 2] = wrap_angle(yaw)
    batch = ParticleBatch(program, n, x, grasp_choice, grasp_locals, grasp_widths)

    def try_ik(pose_arr):
        try:
            return ik(program.arm, Pose2(pose_arr[0], pose_arr[1], pose_arr[2]))
        except Unreachable:
            return []

    for conf in program.configs:
        targets = conf.target_chain.bind(x, batch).pose
        branch_draw = rng.random(n)
        for i in range(n):
            sols = try_ik(targets[i])
            if not sols and conf.kind == "pick":
                # two-finger grippers are symmetric under a pi rotation; the
                # flipped orientation may be the reachable one
                flipped = targets[i].copy()
                flipped[2] = wrap_angle(flipped[2] + math.pi)
                sols = try_ik(flipped)
                if sols:
                    key = conf.action_idx
                    grasp_locals[key][i, 2] = wrap_angle(
                        grasp_locals[key][i, 2] + math.pi
                    )
            if sols:
                pick = min(int(branch_draw[i] * len(sols)), len(sols) - 1)
                x[i, conf.ofs : conf.ofs + 3] = sols[pick]
    return batch.refresh()


def optimize_particles(batch, spec=None, iters=200, step=0.01, k_min=8,
                       collision_relax=0.0, trace=None, freeze_after=3):
    """Projected gradient descent on the weighted violation, per-particle
    backtracking (halve up to 4 times, keep the old point on failure), early
    exit once k_min particles satisfy every constraint. Particles whose line
    search fails ``freeze_after`` times in a row drop out of the active set.
    ``trace`` (a list, when given) collects the best violation per iteration."""
    program = batch.program
    if spec is not None and spec is not program.spec:
        program.spec = spec
    out = batch.clone()
    out.refresh(collision_relax)
    if iters <= 0:
        return out
    x = out.x
    costs = out.costs
    viol = program.total_violation(costs, collision_relax)
    sat = program.satisfied(costs, collision_relax)
    fails = np.zeros(batch.n, dtype=int)
    active = (viol > 1e-12) & ~sat
    for _ in range(iters):
        if trace is not None:
            trace.append(float(viol.min()))
        if int(sat.sum()) >= k_min:
            break
        rows = np.flatnonzero(active)
        if len(rows) == 0:
            break
        x_rows = x[rows]
        _, grad = program.violation_gradient(x_rows, out, collision_relax, rows)
        viol_rows = viol[rows]
        new_x = x_rows.copy()
        new_viol = viol_rows.copy()
        new_costs = costs[rows].copy()
        accepted = np.zeros(len(rows), dtype=bool)
        alpha = step
        for _halving in range(5):
            rem = np.flatnonzero(~accepted)
            if len(rem) == 0:
                break
            cand = program.project(x_rows[rem] - alpha * grad[rem])
            cand_costs, _ = program.evaluate(cand, out, rows=rows[rem])
            cand_viol = program.total_violation(cand_costs, collision_relax)
            improve = cand_viol <= viol_rows[rem] - 1e-15
            take = rem[improve]
            new_x[take] = cand[improve]
            new_viol[take] = cand_viol[improve]
            new_costs[take] = cand_costs[improve]
            accepted[take] = True
            alpha /= 2.0
        x[rows] = new_x
        viol[rows] = new_viol
        costs[rows] = new_costs
        fails[rows[accepted]] = 0
        fails[rows[~accepted]] += 1
        sat = program.satisfied(costs, collision_relax)
        active = (viol > 1e-12) & ~sat & (fails < freeze_after)
    if trace is not None:
        trace.append(float(viol.min()))
    out.x = x
    return out.refresh(collision_relax)


def slice_batch(batch, i):
    """Single-particle view of a batch (used for post-hoc plan validation)."""
    out = ParticleBatch(
        batch.program, 1, batch.x[i : i + 1].copy(),
        {k: v[i : i + 1].copy() for k, v in batch.grasp_choice.items()},
        {k: v[i : i + 1].copy() for k, v in batch.grasp_locals.items()},
        {k: v[i : i + 1].copy() for k, v in batch.grasp_widths.items()},
        None if batch.costs is None else batch.costs[i : i + 1].copy(),
        None if batch.satisfied is None else batch.satisfied[i : i + 1].copy(),
    )
    return out


def term_gradient(program, term_idx, x, batch):
    """Dense (N, D) gradient of one cost term (testing hook)."""
    term = program.terms[term_idx]
    _, parts = term.value(x, batch, need_grad=True)
    grads = np.zeros_like(x)
    for part in parts:
        if part[0] == "config":
            _, ofs, gq = part
            grads[:, ofs : ofs + 3] += gq
        else:
            bound, points, dl = part
            if dl.ndim == 3:
                bound.accumulate_point_grad(points, dl, grads)
            else:
                bound.accumulate_pose_grad(dl, grads)
    return grads


def rank_skeletons(skeletons, belief, gripper, arm, n=128, seed=0, spec=None):
    """Order skeletons by mean initialization violation (length, index break
    ties). Skeletons that cannot source grasps rank last with inf score."""
    spec = spec or CostSpec()
    scored = []
    for skel in skeletons:
        try:
            program = compile_skeleton(skel, belief, gripper, arm, spec)
            batch = init_particles(program, n, seed + skel.index)
            score = float(batch.total_violation().mean())
        except NoGraspSource:
            program, batch, score = None, None, math.inf
        scored.append((score, len(skel), skel.index, skel, program, batch))
    scored.sort(key=lambda row: (row[0], row[1], row[2]))
    return scored


def validate_particle(batch, i, exact=False, polygon_overrides=None):
    """Re-check one particle: soft costs vs thresholds, or exact polygon
    geometry at every key state. Returns a list of violated-constraint
    descriptions (empty = valid)."""
    program = batch.program
    x_row = batch.x[i]
    if not np.all(np.isfinite(x_row)):
        raise DegenerateInput("particle has unbound slots")
    if not exact:
        costs = batch.costs[i]
        out = []
        for t_idx, term in enumerate(program.terms):
            thr = program.spec.threshold(term.kind)
            if costs[t_idx] > thr + 1e-12:
                out.append(f"{term.label}: {costs[t_idx]:.5f} > {thr}")
        return out
    return _validate_exact(batch, i, polygon_overrides or {})


def _pose_of(ref, x_row):
    if ref[0] == "const":
        return np.asarray(ref[1], dtype=float)
    return x_row[ref[1] : ref[1] + 3]


def _apply(pose, pts):
    c, s = math.cos(pose[2]), math.sin(pose[2])
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(pts) @ rot.T + pose[:2]


def _validate_exact(batch, i, overrides):
    program = batch.program
    x_row = batch.x[i]
    spec = program.spec
    out = []
    pose_ref = {lab: ("const", obj.init_pose.as_array())
                for lab, obj in program.by_label.items()}
    z_int = {lab: (obj.hull.z_base, obj.hull.z_top)
             for lab, obj in program.by_label.items()}

    def polygon(lab):
        if lab in overrides:
            return overrides[lab]
        return program.by_label[lab].local_vertices

    place_iter = iter(program.placements)
    conf_iter = iter(program.configs)
    for idx, action in enumerate(program.skeleton.actions):
        if action.name == PICK:
            conf = next(conf_iter)
            _check_reach(program, batch, i, conf, out, idx)
        elif action.name == PLACE:
            slot = next(place_iter)
            conf = next(conf_iter)
            _check_reach(program, batch, i, conf, out, idx)
            pose = x_row[slot.ofs : slot.ofs + 3]
            placed = _apply(pose, polygon(slot.obj))
            corners = slot.region.contains(placed, margin=-1e-9)
            if not np.all(corners):
                out.append(f"exact-contain[{idx}]{slot.obj}")
            area = polygon_obb_overlap_area(placed, slot.region)
            if area / polygon_area(placed) < spec.support_fraction - 1e-9:
                out.append(f"exact-stable[{idx}]{slot.obj}")
            new_z = (slot.z_base, slot.z_base + (z_int[slot.obj][1] - z_int[slot.obj][0]))
            for lab in sorted(program.by_label):
                if lab in (slot.obj, slot.surface):
                    continue
                if min(new_z[1], z_int[lab][1]) - max(new_z[0], z_int[lab][0]) <= 1e-9:
                    continue
                other = _apply(_pose_of(pose_ref[lab], x_row), polygon(lab))
                if convex_polygons_intersect(placed, other):
                    out.append(f"exact-collide[{idx}]{slot.obj}-vs-{lab}")
            pose_ref[slot.obj] = ("slot", slot.ofs)
            z_int[slot.obj] = new_z
        elif action.name == WIPE:
            conf = next(conf_iter)
            _check_reach(program, batch, i, conf, out, idx)
    return out


def _check_reach(program, batch, i, conf, out, idx):
    q = batch.x[i, conf.ofs : conf.ofs + 3]
    ee = fk_batch(program.arm, q[None, :])[0]
    target = conf.target_chain.bind(batch.x, batch).pose[i]
    err = math.hypot(ee[0] - target[0], ee[1] - target[1])
    yaw_err = abs(float(wrap_angle(ee[2] - target[2])))
    thr = program.spec.thresholds["reachability"]
    if err > thr + 1e-9:
        out.append(f"exact-reach[{idx}]: {err:.5f} m")
    elif yaw_err > 0.02:
        out.append(f"exact-reach-yaw[{idx}]: {yaw_err:.5f} rad")

"""End-to-end solve: iterate skeletons in rank order, optimize particle
batches, and for satisfied particles request collision-free trajectories
segment by segment; fall back to a relaxed collision threshold (exact
polygon re-check gating) before giving up.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import (
    MotionTimeout,
    NoFeasiblePlan,
    NoGraspSource,
    NoSkeleton,
    PlanTimeout,
    StartInCollision,
    GoalInCollision,
    Unreachable,
)
from ..execution import GraspRef
from ..geom import Pose2
from ..motion import (
    HeldBody,
    MotionConfig,
    MotionWorld,
    ObstacleEntry,
    concat_trajectories,
    ik,
    make_dwell,
    plan_path,
    time_parameterize,
)
from ..rng import derive_seed
from .particles import (
    CostSpec,
    compile_skeleton,
    init_particles,
    optimize_particles,
    rank_skeletons,
    slice_batch,
    validate_particle,
)
from .symbolic import MOVE_FREE, MOVE_HOLDING, PICK, PLACE, WIPE, domain_from_belief, enumerate_skeletons


@dataclass
class PlanConfig:
    n_particles: int = 512
    iters: int = 200
    step: float = 0.01
    k_min: int = 8
    retry_cap: int = 10
    max_skeletons: int = 20
    max_len: int = None  # default: 4 * goal size + 4
    relax: float = 0.005
    rank_particles: int = 64
    dilation: float = 0.6
    settle_time: float = 0.3
    grip_dwell: float = 0.2
    carry_lift: float = 0.03
    link_plane_z: float = 0.25
    q_home: tuple = (math.pi, 0.4, 0.4)
    motion: MotionConfig = field(default_factory=MotionConfig)
    cost: CostSpec = field(default_factory=CostSpec)


@dataclass
class Plan:
    skeleton: object
    particle: np.ndarray
    grasp_choice: dict
    trajectory: object
    grasp_refs: list
    segments: list
    final_costs: np.ndarray
    relaxed: bool = False
    program: object = None
    validation_batch: object = None

    def report(self):
        """Serializable plan summary: skeleton, bound values, costs, segments."""
        prog = self.program
        return {
            "skeleton": [str(a) for a in self.skeleton.actions],
            "relaxed": self.relaxed,
            "grasp_choice": {str(k): int(v) for k, v in self.grasp_choice.items()},
            "placements": {
                f"?p{j}": [round(float(v), 9) for v in
                           self.particle[s.ofs:s.ofs + 3]]
                for j, s in enumerate(prog.placements)
            },
            "configurations": {
                f"q[{c.action_idx}]": [round(float(v), 9) for v in
                                       self.particle[c.ofs:c.ofs + 3]]
                for c in prog.configs
            },
            "final_costs": {
                prog.terms[t].label: round(float(self.final_costs[t]), 9)
                for t in range(len(prog.terms))
            },
            "segments": self.segments,
        }


def solve(belief, goal, arm, gripper, seed=0, cfg=None, budget=None, erasers=()):
    """Search skeletons and continuous parameters for a full manipulation plan.

    Deterministic given the seed. Raises PlanTimeout when the budget runs
    out between stages and NoFeasiblePlan when every route is exhausted.
    """
    cfg = cfg or PlanConfig()
    budget = budget if budget is not None else 30.0
    t0 = time.monotonic()

    def check_budget():
        if time.monotonic() - t0 > budget:
            raise PlanTimeout(budget)

    check_budget()
    domain = domain_from_belief(belief, erasers)
    max_len = cfg.max_len or (4 * len(goal.predicates) + 4)
    try:
        skeletons = enumerate_skeletons(domain, goal, max_len=max_len, k=cfg.max_skeletons)
    except NoSkeleton as exc:
        raise NoFeasiblePlan("optimization") from exc

    ranked = rank_skeletons(
        skeletons, belief, gripper, arm, n=cfg.rank_particles,
        seed=derive_seed(seed, "rank"), spec=cfg.cost,
    )

    last_cause = "optimization"
    relaxed_pool = []
    for score, _, _, skel, program, _ in ranked:
        check_budget()
        if program is None:
            last_cause = "grasps"
            continue
        batch = init_particles(program, cfg.n_particles, derive_seed(seed, "init", skel.index))
        batch = optimize_particles(batch, cfg.cost, iters=cfg.iters, step=cfg.step,
                                   k_min=cfg.k_min)
        order = _particle_order(batch, batch.satisfied)
        for count, p_idx in enumerate(order[: cfg.retry_cap]):
            check_budget()
            plan = _try_particle(batch, p_idx, arm, gripper, cfg, seed, relaxed=False)
            if isinstance(plan, Plan):
                plan.program = batch.program
                return plan
            last_cause = plan
        relaxed_pool.append(batch)

    # fallback: relax the disc-geometry thresholds, gate on the exact
    # polygon re-check, retry motion with the widened margin
    for batch in relaxed_pool:
        check_budget()
        relaxed_ok = batch.program.satisfied(batch.costs, collision_relax=cfg.relax)
        order = _particle_order(batch, relaxed_ok)
        for p_idx in order[: cfg.retry_cap]:
            if validate_particle(batch, p_idx, exact=True):
                continue
            plan = _try_particle(batch, p_idx, arm, gripper, cfg, seed, relaxed=True)
            if isinstance(plan, Plan):
                plan.program = batch.program
                return plan
            last_cause = plan
    raise NoFeasiblePlan(last_cause)


def _particle_order(batch, ok_mask):
    idx = np.flatnonzero(ok_mask)
    if len(idx) == 0:
        return []
    viol = batch.total_violation()
    weighted = batch.costs.sum(axis=1)
    order = sorted(idx.tolist(), key=lambda i: (viol[i], weighted[i], i))
    return order


def _try_particle(batch, p_idx, arm, gripper, cfg, seed, relaxed):
    """Plan every trajectory slot for one particle; returns Plan or a cause
    string ('motion') when some segment cannot be solved."""
    program = batch.program
    x = batch.x[p_idx]
    margin = -cfg.relax if relaxed else 0.0
    pieces = []
    segments = []
    grasp_refs = []
    q_cur = np.asarray(cfg.q_home, dtype=float)
    gripper_state = 0
    conf_by_action = {c.action_idx: c for c in program.configs}
    move_by_action = {m.action_idx: m for m in program.moves}

    for idx, action in enumerate(program.skeleton.actions):
        if action.name in (MOVE_FREE, MOVE_HOLDING):
            move = move_by_action[idx]
            q_to = x[program.configs[move.to_conf].ofs:
                     program.configs[move.to_conf].ofs + 3]
            world = _motion_world(program, move, x, batch, p_idx, cfg, margin)
            try:
                path = plan_path(arm, q_cur, q_to, world,
                                 seed=derive_seed(seed, "rrt", idx, p_idx),
                                 cfg=cfg.motion)
            except (MotionTimeout, StartInCollision, GoalInCollision):
                return "motion"
            piece = time_parameterize(arm, path, dilation=cfg.dilation,
                                      gripper=gripper_state)
            pieces.append(piece)
            segments.append({"action": str(action), "kind": "move",
                             "waypoints": len(path),
                             "duration": round(piece.duration, 6)})
            q_cur = q_to.copy()
        elif action.name == PICK:
            obj = action.params[0]
            pieces.append(make_dwell(q_cur, cfg.settle_time, 0))
            pieces.append(make_dwell(q_cur, cfg.grip_dwell, 1))
            gripper_state = 1
            grasp_pose, width = _grasp_world(program, batch, p_idx, idx, x)
            grasp_refs.append(GraspRef(obj, grasp_pose, width))
            segments.append({"action": str(action), "kind": "pick",
                             "grasp": [round(grasp_pose.x, 6), round(grasp_pose.y, 6),
                                       round(grasp_pose.yaw, 6)]})
        elif action.name == PLACE:
            pieces.append(make_dwell(q_cur, cfg.settle_time, 1))
            pieces.append(make_dwell(q_cur, cfg.grip_dwell, 0))
            gripper_state = 0
            segments.append({"action": str(action), "kind": "place"})
        elif action.name == WIPE:
            piece, q_cur2 = _wipe_piece(program, batch, p_idx, idx, arm, cfg, q_cur)
            if piece is None:
                return "motion"
            pieces.append(make_dwell(q_cur, cfg.settle_time, 1))
            pieces.append(piece)
            q_cur = q_cur2
            segments.append({"action": str(action), "kind": "wipe",
                             "duration": round(piece.duration, 6)})
    trajectory = concat_trajectories(pieces)
    plan = Plan(
        skeleton=program.skeleton,
        particle=x.copy(),
        grasp_choice={k: int(v[p_idx]) for k, v in batch.grasp_choice.items()},
        trajectory=trajectory,
        grasp_refs=grasp_refs,
        segments=segments,
        final_costs=batch.costs[p_idx].copy(),
        relaxed=relaxed,
    )
    plan.validation_batch = slice_batch(batch, p_idx)
    return plan


def _grasp_world(program, batch, p_idx, pick_idx, x):
    """World grasp pose of the chosen candidate at the pick step."""
    conf = next(c for c in program.configs if c.action_idx == pick_idx)
    pose = conf.target_chain.bind(batch.x, batch).pose[p_idx]
    width = float(batch.grasp_widths[pick_idx][p_idx])
    return Pose2(pose[0], pose[1], pose[2]), width


def _motion_world(program, move, x, batch, p_idx, cfg, margin):
    obstacles = []
    for lab, ref, zlo, zhi in move.obstacles:
        discs = program.by_label[lab].discs_local
        if ref[0] == "const":
            pose = Pose2(*[float(v) for v in ref[1]])
        else:
            pose = Pose2(*[float(v) for v in x[ref[1]:ref[1] + 3]])
        obstacles.append(ObstacleEntry(discs.transformed(pose), (zlo, zhi), lab))
    held = None
    if move.kind == "holding":
        grasp_local = batch.grasp_locals[move.grasp_key][p_idx]
        gpose = Pose2(grasp_local[0], grasp_local[1], grasp_local[2])
        obj = program.by_label[move.held]
        in_gripper = obj.discs_local.transformed(gpose.inverse())
        held = HeldBody(in_gripper, move.carry_z)
    return MotionWorld(obstacles, held, cfg.link_plane_z, margin)


def _wipe_piece(program, batch, p_idx, wipe_idx, arm, cfg, q_start):
    """IK-chain the wipe strokes into a slow joint trajectory."""
    strokes = program.wipe_strokes[wipe_idx]
    grasp_key = program._pick_for(wipe_idx)
    grasp_local = batch.grasp_locals[grasp_key][p_idx]
    gpose = Pose2(grasp_local[0], grasp_local[1], grasp_local[2])
    path = [np.asarray(q_start, dtype=float)]
    for stroke in strokes:
        target = stroke.compose(gpose)
        try:
            sols = ik(arm, target)
        except Unreachable:
            return None, None
        if not sols:
            return None, None
        prev = path[-1]
        best = min(sols, key=lambda s: float(np.abs(s - prev).max()))
        path.append(best)
    piece = time_parameterize(arm, path, dilation=cfg.dilation * 0.7, gripper=1)
    return piece, path[-1]

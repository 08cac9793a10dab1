"""Trial harness: scene files, the perceive -> ground -> plan -> execute
pipeline with stage-local sub-seeds, failure classification, task-progress
scoring, and deterministic aggregation.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import (
    DegenerateInput,
    DesktampError,
    GroundingError,
    InvariantError,
    MotionTimeout,
    NoFeasiblePlan,
    ParseError,
    PlanTimeout,
    Unclassifiable,
)
from .execution import ControllerGains, ExecConfig, GraspModel, simulate_trajectory
from .geom import ConvexFootprint, Pose2, _edge_crosses
from .ground import Detection, RemoteEndpoint, goal_holds, parse_instruction, remote_ground
from .motion import ArmModel
from .percept import (
    GripperSpec,
    PerceptionConfig,
    build_belief,
    camera_attached,
    camera_look_at,
    localize_wipe_region,
)
from .plan import PlanConfig, solve
from .plan.particles import validate_particle
from .rng import derive_seed
from .scene import MarkedRegion, Scene, SceneObject

FAILURE_CLASSES = ("none", "grasp", "scene_completion", "vlm", "planner",
                   "motion", "tracking", "unclassifiable")
RUBRIC_PREFIXES = ("grasp", "place", "cleared", "wiped")
SCENE_VERSION = 1


# --- scene files ---

def load_scene(path):
    """Parse and invariant-check a .scene file into a Scene."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return scene_from_dict(doc, name=os.path.splitext(os.path.basename(path))[0])


def scene_from_dict(doc, name=None):
    if doc.get("version") != SCENE_VERSION:
        raise InvariantError("version", f"expected {SCENE_VERSION}")
    table = doc.get("table", {})
    bounds = tuple(table.get("bounds", (0.14, 0.62, -0.30, 0.30)))
    arm = ArmModel(**doc.get("arm", {}))

    objects = []
    names = set()
    for i, rec in enumerate(doc.get("objects", [])):
        label = rec.get("name")
        if not label or label in names:
            raise InvariantError(f"objects[{i}].name", f"missing or duplicate {label!r}")
        names.add(label)
        verts = np.asarray(rec["footprint"], dtype=float)
        _check_convex(verts, i)
        attrs = rec.get("attributes", {})
        marked = rec.get("marked_region")
        region = None
        if marked is not None:
            region = MarkedRegion(marked["center"], marked["half_extents"],
                                  marked.get("yaw", 0.0))
        objects.append(SceneObject(
            label, verts, float(rec["height"]), Pose2(*rec["pose"]),
            z_base=float(rec.get("z_base", 0.0)),
            color=attrs.get("color", ""), category=attrs.get("category", ""),
            is_eraser=bool(attrs.get("is_eraser", False)), marked_region=region,
        ))

    rubric = []
    for j, row in enumerate(doc.get("progress_rubric", [])):
        key, weight = row[0], float(row[1])
        if not -100.0 <= weight <= 100.0:
            raise InvariantError(f"progress_rubric[{j}]", f"weight {weight} outside [-100, 100]")
        prefix = key.split(":", 1)[0]
        if prefix not in RUBRIC_PREFIXES:
            raise InvariantError(f"progress_rubric[{j}]", f"unknown event key {key!r}")
        rubric.append((key, weight))

    scene = Scene(
        objects=objects,
        table_bounds=bounds,
        arm=arm,
        camera=None,
        table_z=float(table.get("z", 0.0)),
        seed=int(doc.get("seed", 0)),
        instruction=doc.get("instruction", ""),
        rubric=rubric,
        name=doc.get("name", name or "scene"),
    )
    scene.camera = _camera_from_record(doc.get("camera", {}), arm)
    return scene


def _camera_from_record(rec, arm):
    kind = rec.get("kind", "look_at")
    fx = rec.get("fx", 190.0)
    width = rec.get("width", 160)
    height = rec.get("height", 120)
    if kind == "attached":
        t_cam_ee = np.asarray(rec["t_cam_ee"], dtype=float).reshape(4, 4)
        return camera_attached(arm, np.asarray(rec["q0"], dtype=float), t_cam_ee,
                               fx=fx, width=width, height=height,
                               ee_z=rec.get("ee_z", 0.25))
    return camera_look_at(rec.get("eye", [0.05, 0.0, 0.8]),
                          rec.get("look_at", [0.38, 0.0, 0.0]),
                          fx=fx, width=width, height=height,
                          fy=rec.get("fy"))


def _check_convex(verts, obj_index):
    try:
        ConvexFootprint(verts, 1.0)
    except DegenerateInput as exc:
        bad = 0
        if verts.ndim == 2 and len(verts) >= 3 and verts.shape[1] == 2:
            crosses = _edge_crosses(verts)
            order = np.argsort(crosses)
            bad = int(order[0])
        raise InvariantError(f"objects[{obj_index}].footprint",
                             f"not strictly convex at vertex {bad}") from exc


# --- trial configuration / report ---

@dataclass
class TrialConfig:
    grounder: str = "builtin"  # or "remote:<url>"
    inject: str = None  # one of grasp | scene | vlm | planner
    noise_sigma: float = 0.0
    mask_morph: int = 0
    budget: float = 30.0
    trial_index: int = 0
    gripper: GripperSpec = field(default_factory=GripperSpec)
    plan: PlanConfig = field(default_factory=PlanConfig)
    gains: ControllerGains = field(default_factory=ControllerGains)
    exec_cfg: ExecConfig = field(default_factory=ExecConfig)
    slip_per_second: float = 0.0
    scene_erosion_px: int = 8  # mask erosion used by the 'scene' injection
    remote_timeout: float = 10.0


@dataclass
class TrialReport:
    scene: str
    trial_index: int
    seed: int
    success: bool
    task_progress: float
    failure_class: str
    timings: dict
    injected: str = None
    goal: list = field(default_factory=list)
    goal_truth: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    plan_report: dict = None
    exec_summary: dict = None
    error: str = None

    def to_dict(self):
        return {
            "scene": self.scene,
            "trial_index": self.trial_index,
            "seed": self.seed,
            "success": self.success,
            "task_progress": round(float(self.task_progress), 6),
            "failure_class": self.failure_class,
            "injected": self.injected,
            "goal": self.goal,
            "goal_truth": self.goal_truth,
            "events": self.events,
            "plan": self.plan_report,
            "exec": self.exec_summary,
            "error": self.error,
            "timings": {k: round(float(v), 6) for k, v in self.timings.items()},
        }


def report_to_json(report, strip_timings=False):
    doc = report.to_dict() if isinstance(report, TrialReport) else dict(report)
    if strip_timings:
        doc = {k: v for k, v in doc.items() if k != "timings"}
    return json.dumps(doc, sort_keys=True, indent=1)


def parse_report_json(text):
    return json.loads(text)


# --- the pipeline ---

class _StageFailure(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def detections_from_observation(obs):
    """Detection records from mask extents, normalized to 0-1000 integers."""
    h, w = obs.depth.shape
    out = []
    for obj_id in sorted(obs.masks):
        mask = obs.masks[obj_id]
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            continue
        bbox = (
            int(rows.min() / h * 1000), int(cols.min() / w * 1000),
            min(1000, int(math.ceil((rows.max() + 1) / h * 1000))),
            min(1000, int(math.ceil((cols.max() + 1) / w * 1000))),
        )
        out.append(Detection(obs.labels[obj_id], bbox))
    return out


def project_region_bbox(scene, camera, obj_name):
    """Ground-truth stand-in for the grounder's second query: the marked
    region's corners projected into the image as a 0-1000 box."""
    obj = scene.objects[scene.index_of(obj_name)]
    region = obj.marked_region
    corners_local = np.array([
        region.center + region.half_extents * np.array([sx, sy])
        for sx in (-1, 1) for sy in (-1, 1)
    ])
    world = obj.pose.transform(corners_local)
    pts = np.column_stack([world, np.full(4, obj.z_top)])
    rel = (pts - camera.position) @ camera.rotation
    u = rel[:, 0] / rel[:, 2] * camera.fx + camera.cx
    v = rel[:, 1] / rel[:, 2] * camera.fy + camera.cy
    h, w = camera.height, camera.width
    return (
        max(0, int(v.min() / h * 1000)), max(0, int(u.min() / w * 1000)),
        min(1000, int(math.ceil(v.max() / h * 1000))),
        min(1000, int(math.ceil(u.max() / w * 1000))),
    )


def run_trial(scene, cfg=None):
    """Execute one seeded trial of the full pipeline; never raises: every
    failure path becomes a classified report."""
    cfg = cfg or TrialConfig()
    base_seed = derive_seed(scene.seed, "trial", cfg.trial_index)
    timings = {"perceive": 0.0, "plan": 0.0, "execute": 0.0}
    record = {
        "stage_error": None, "plan": None, "outcome": None, "goal": None,
        "belief": None, "truth_violations": [], "belief_violations": [],
    }

    try:
        t0 = time.perf_counter()
        obs, cloud, belief, goal, erasers = _perceive_and_ground(scene, cfg, base_seed, record)
        timings["perceive"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        plan = _plan_stage(scene, belief, goal, cfg, base_seed, erasers)
        timings["plan"] = time.perf_counter() - t0
        record["plan"] = plan

        t0 = time.perf_counter()
        outcome = _execute_stage(scene, plan, cfg, base_seed)
        timings["execute"] = time.perf_counter() - t0
        record["outcome"] = outcome
    except _StageFailure as failure:
        record["stage_error"] = failure

    return _finish_report(scene, cfg, base_seed, record, timings)


def _perceive_and_ground(scene, cfg, base_seed, record):
    morph = cfg.mask_morph
    if cfg.inject == "scene":
        morph = max(morph, cfg.scene_erosion_px)
    pcfg = PerceptionConfig(noise_sigma=cfg.noise_sigma, mask_morph=morph)
    try:
        obs, cloud, belief = build_belief(scene, scene.camera, cfg.gripper, pcfg,
                                          seed=derive_seed(base_seed, "perceive"))
    except DesktampError as exc:
        raise _StageFailure("percept", exc)
    record["belief"] = belief

    instruction = scene.instruction
    if cfg.inject == "vlm":
        instruction = "put the phantom gizmo on the table"
    detections = detections_from_observation(obs)
    attributes = scene.attributes()
    try:
        if cfg.grounder.startswith("remote:"):
            url = os.environ.get("DESKTAMP_GROUNDER_URL", cfg.grounder[len("remote:"):])
            hints = [{"label": d.label, "box_2d": list(d.bbox)} for d in detections]
            _, goal = remote_ground(instruction, {"detections": hints},
                                    RemoteEndpoint(url, cfg.remote_timeout))
        else:
            goal = parse_instruction(instruction, detections, attributes)
    except GroundingError as exc:
        raise _StageFailure("ground", exc)
    record["goal"] = goal

    erasers = tuple(sorted(
        d.label for d in detections if attributes.get(d.label, {}).get("is_eraser")
    ))
    label_ids = belief.label_to_id()
    for pred in goal.predicates:
        if pred.name == "IsCleaned":
            surf = pred.args[0]
            try:
                bbox = project_region_bbox(scene, scene.camera, surf)
                belief.wipe_regions[surf] = localize_wipe_region(
                    obs, label_ids[surf], cloud, bbox)
            except (DesktampError, KeyError) as exc:
                raise _StageFailure("ground", exc)
    return obs, cloud, belief, goal, erasers


def _plan_stage(scene, belief, goal, cfg, base_seed, erasers):
    budget = 1e-9 if cfg.inject == "planner" else cfg.budget
    try:
        return solve(belief, goal, scene.arm, cfg.gripper,
                     seed=derive_seed(base_seed, "plan"), cfg=cfg.plan,
                     budget=budget, erasers=erasers)
    except (NoFeasiblePlan, PlanTimeout) as exc:
        raise _StageFailure("plan", exc)


def _execute_stage(scene, plan, cfg, base_seed):
    slip = 1e9 if cfg.inject == "grasp" else cfg.slip_per_second
    return simulate_trajectory(
        scene, scene.arm, cfg.gains, plan.trajectory,
        grasp_model=GraspModel(slip_per_second=slip),
        seed=derive_seed(base_seed, "exec"),
        grasp_refs=plan.grasp_refs, cfg=cfg.exec_cfg,
    )


def _finish_report(scene, cfg, base_seed, record, timings):
    goal = record["goal"]
    outcome = record["outcome"]
    success = False
    goal_truth = {}
    if goal is not None and outcome is not None:
        success, detail = goal_holds(goal, outcome.final_scene)
        goal_truth = {str(p): bool(v) for p, v in detail.items()}

    if not success and record["plan"] is not None and outcome is not None:
        _exact_validation(scene, record)

    events = _rubric_events(scene, outcome)
    progress = _task_progress(scene, events) if goal is not None else 0.0
    if success:
        failure = "none"
        progress = max(progress, 100.0) if not scene.rubric else progress
    else:
        try:
            failure = classify_failure(record)
        except Unclassifiable:
            failure = "unclassifiable"

    plan_report = record["plan"].report() if record["plan"] is not None else None
    exec_summary = None
    if outcome is not None:
        exec_summary = {
            "max_ee_error": round(float(outcome.max_ee_error), 6),
            "grasp_events": [
                {"object": ev.object_name, "success": bool(ev.success),
                 "t": round(ev.t, 4),
                 "slip_time": None if ev.slip_time is None else round(ev.slip_time, 4)}
                for ev in outcome.grasp_events
            ],
            "wiped_coverage": {k: round(float(v), 4)
                               for k, v in outcome.wiped_coverage.items()},
        }
    err = record["stage_error"]
    return TrialReport(
        scene=scene.name,
        trial_index=cfg.trial_index,
        seed=base_seed,
        success=bool(success),
        task_progress=progress,
        failure_class=failure,
        timings=timings,
        injected=cfg.inject,
        goal=[str(p) for p in goal.predicates] if goal is not None else [],
        goal_truth=goal_truth,
        events=sorted(events),
        plan_report=plan_report,
        exec_summary=exec_summary,
        error=None if err is None else f"{err.stage}: {type(err.cause).__name__}",
    )


def _exact_validation(scene, record):
    """Re-check the executed particle exactly against belief and truth hulls."""
    plan = record["plan"]
    belief = record["belief"]
    if plan is None or plan.validation_batch is None or belief is None:
        return
    batch = plan.validation_batch
    overrides = {}
    for obj in belief.objects.values():
        try:
            idx = scene.index_of(obj.label)
        except DesktampError:
            continue
        truth_world = scene.objects[idx].world_vertices()
        overrides[obj.label] = truth_world - np.array([obj.init_pose.x, obj.init_pose.y])
    record["belief_violations"] = validate_particle(batch, 0, exact=True)
    record["truth_violations"] = validate_particle(batch, 0, exact=True,
                                                   polygon_overrides=overrides)


def _rubric_events(scene, outcome):
    if outcome is None:
        return []
    events = set()
    final = outcome.final_scene
    for ev in outcome.grasp_events:
        if ev.success and ev.object_name:
            events.add(f"grasp:{ev.object_name}")
    for key, _ in scene.rubric:
        parts = key.split(":")
        if parts[0] == "place" and len(parts) == 3:
            try:
                ok, _ = goal_holds_single_on(final, parts[1], parts[2])
            except DesktampError:
                ok = False
            if ok:
                events.add(key)
        elif parts[0] == "cleared" and len(parts) == 2:
            try:
                before = scene.objects[scene.index_of(parts[1])].world_centroid()
                after = final.objects[final.index_of(parts[1])].world_centroid()
            except DesktampError:
                continue
            if float(np.linalg.norm(after - before)) >= 0.05:
                events.add(key)
        elif parts[0] == "wiped" and len(parts) == 2:
            if outcome.wiped_coverage.get(parts[1], 0.0) >= 0.99:
                events.add(key)
    return list(events)


def goal_holds_single_on(scene, mover, surface):
    from .ground import GoalSpec, Predicate

    return goal_holds(GoalSpec((Predicate("On", (mover, surface)),)), scene)


def _task_progress(scene, events):
    total = sum(weight for key, weight in scene.rubric if key in events)
    return float(min(100.0, max(0.0, total)))


# --- failure classification ---

def classify_failure(record):
    """Fixed-precedence attribution of an unsuccessful trial to a module."""
    err = record["stage_error"]
    if err is not None and err.stage == "ground":
        return "vlm"
    if err is not None and err.stage == "percept":
        return "scene_completion"  # TooFewPoints and reconstruction failures
    if record["truth_violations"] and not record["belief_violations"]:
        return "scene_completion"
    if err is not None and err.stage == "plan":
        cause = err.cause
        if isinstance(cause, NoFeasiblePlan) and cause.cause == "motion":
            return "motion"
        if isinstance(cause, MotionTimeout):
            return "motion"
        return "planner"
    outcome = record["outcome"]
    if outcome is not None:
        for ev in outcome.grasp_events:
            if not ev.success or ev.slip_time is not None:
                return "grasp"
        if outcome.max_ee_error > 0.002:
            return "tracking"
    raise Unclassifiable("no classification rule matched")


# --- aggregation ---

def round_half_up(x, ndigits=1):
    return float(Decimal(str(x)).quantize(Decimal("0." + "0" * ndigits),
                                          rounding=ROUND_HALF_UP))


def aggregate_report(reports):
    """Per-scene success rate + mean task progress, overall aggregates, and
    stage -> outcome flow counts for the failure diagram."""
    if not reports:
        raise DegenerateInput("need at least one report")
    rows = {}
    order = []
    for rep in reports:
        doc = rep.to_dict() if isinstance(rep, TrialReport) else rep
        key = doc["scene"]
        if key not in rows:
            rows[key] = {"scene": key, "trials": 0, "successes": 0, "progress": []}
            order.append(key)
        rows[key]["trials"] += 1
        rows[key]["successes"] += int(doc["success"])
        rows[key]["progress"].append(float(doc["task_progress"]))

    scene_rows = []
    for key in order:
        row = rows[key]
        tp = round_half_up(sum(row["progress"]) / len(row["progress"]))
        scene_rows.append({
            "scene": key,
            "sr": f"{row['successes']}/{row['trials']}",
            "sr_num": row["successes"],
            "sr_den": row["trials"],
            "tp": tp,
        })

    flow = {"trials": 0, "success": 0, "failures": {}}
    for rep in reports:
        doc = rep.to_dict() if isinstance(rep, TrialReport) else rep
        flow["trials"] += 1
        if doc["success"]:
            flow["success"] += 1
        else:
            cls = doc["failure_class"]
            flow["failures"][cls] = flow["failures"].get(cls, 0) + 1
    flow["failures"] = dict(sorted(flow["failures"].items()))

    overall = aggregate_rows(scene_rows)
    return {"scenes": scene_rows, "overall": overall, "flow": flow}


def aggregate_rows(rows):
    """Category/overall footer arithmetic: sum SR fractions, mean TP."""
    num = sum(r["sr_num"] for r in rows)
    den = sum(r["sr_den"] for r in rows)
    tp = round_half_up(sum(float(r["tp"]) for r in rows) / len(rows))
    return {"sr": f"{num}/{den}", "sr_num": num, "sr_den": den, "tp": tp}


# --- injection schedules ---

def parse_inject_spec(spec):
    """'grasp:34,scene:14,vlm:7,planner:5' -> expanded class list."""
    if not spec:
        return []
    out = []
    for part in spec.split(","):
        name, _, count = part.partition(":")
        name = name.strip()
        if name not in ("grasp", "scene", "vlm", "planner"):
            raise InvariantError("inject", f"unknown injection class {name!r}")
        out.extend([name] * int(count or 1))
    return out

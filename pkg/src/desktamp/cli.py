"""Command line interface.

Subcommands: plan (perceive + ground + plan, write the plan report),
run (plan + execute one trial), eval (seeded trial suites with optional
failure injection), render-depth (observation container + figure).

Exit codes: 0 success, 2 plan failure, 3 execution failure, 4 input error.
"""

import argparse
import glob
import json
import os
import sys

from .errors import DesktampError
from .harness import (
    TrialConfig,
    aggregate_report,
    load_scene,
    parse_inject_spec,
    report_to_json,
    run_trial,
)
from .percept import render_observation
from .report import (
    depth_figure,
    ensure_dir,
    flow_figure,
    scene_topview,
    summary_csv,
    tracking_csv,
    tracking_figure,
)

EXIT_OK = 0
EXIT_PLAN_FAILURE = 2
EXIT_EXEC_FAILURE = 3
EXIT_INPUT_ERROR = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="desktamp",
        description="deterministic tabletop manipulation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="perceive, ground, and plan one scene")
    p_plan.add_argument("--scene", required=True)
    p_plan.add_argument("--instruction", default=None,
                        help="override the scene's instruction")
    p_plan.add_argument("--seed", type=int, default=None)
    p_plan.add_argument("--out", required=True, help="output directory")
    p_plan.add_argument("--grounder", default="builtin",
                        help="builtin or remote:<url>")

    p_run = sub.add_parser("run", help="plan and execute one trial")
    p_run.add_argument("--scene", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--grounder", default="builtin")

    p_eval = sub.add_parser("eval", help="run seeded trial suites")
    p_eval.add_argument("--scenes", required=True,
                        help="directory of .scene files (or one file)")
    p_eval.add_argument("--trials", type=int, default=5)
    p_eval.add_argument("--grounder", default="builtin")
    p_eval.add_argument("--inject", default=None,
                        help="e.g. grasp:34,scene:14,vlm:7,planner:5")
    p_eval.add_argument("--noise-sigma", type=float, default=0.0)
    p_eval.add_argument("--mask-morph", type=int, default=0)
    p_eval.add_argument("--out", required=True)

    p_depth = sub.add_parser("render-depth", help="render the observation")
    p_depth.add_argument("--scene", required=True)
    p_depth.add_argument("--seed", type=int, default=None)
    p_depth.add_argument("--noise-sigma", type=float, default=0.0)
    p_depth.add_argument("--out", required=True,
                         help="output container path (.dtob); a .png lands beside it")
    return parser


def _load(path):
    if not os.path.exists(path):
        raise DesktampError(f"scene file not found: {path}")
    return load_scene(path)


def cmd_plan(args):
    scene = _load(args.scene)
    if args.instruction:
        scene.instruction = args.instruction
    if args.seed is not None:
        scene.seed = args.seed
    out = ensure_dir(args.out)
    cfg = TrialConfig(grounder=args.grounder)
    report, extras = run_trial_with_artifacts(scene, cfg, plan_only=True)
    doc = {
        "scene": report.scene,
        "seed": report.seed,
        "goal": report.goal,
        "plan": report.plan_report,
        "error": report.error,
        "timings": {k: round(v, 6) for k, v in report.timings.items()
                    if k != "execute"},
    }
    with open(os.path.join(out, "plan.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    scene_topview(scene, os.path.join(out, "scene_topview.png"),
                  belief=extras.get("belief"), plan=extras.get("plan"))
    if report.plan_report is None:
        print(f"planning failed: {report.error}")
        return EXIT_PLAN_FAILURE
    print(f"plan: {len(report.plan_report['skeleton'])} actions, "
          f"segments={len(report.plan_report['segments'])}")
    return EXIT_OK


def cmd_run(args):
    scene = _load(args.scene)
    if args.seed is not None:
        scene.seed = args.seed
    out = ensure_dir(args.out)
    cfg = TrialConfig(grounder=args.grounder)
    report, extras = run_trial_with_artifacts(scene, cfg)
    with open(os.path.join(out, "trial.json"), "w") as fh:
        fh.write(report_to_json(report))
        fh.write("\n")
    scene_topview(scene, os.path.join(out, "scene_topview.png"),
                  belief=extras.get("belief"), plan=extras.get("plan"))
    if extras.get("outcome") is not None:
        tracking_figure(extras["outcome"], extras["plan"].trajectory,
                        os.path.join(out, "tracking.png"))
        tracking_csv(extras["outcome"], extras["plan"].trajectory,
                     os.path.join(out, "tracking.csv"))
    print(f"success={report.success} progress={report.task_progress:.0f}% "
          f"class={report.failure_class}")
    if report.success:
        return EXIT_OK
    if report.plan_report is None:
        return EXIT_PLAN_FAILURE
    return EXIT_EXEC_FAILURE


def run_trial_with_artifacts(scene, cfg, plan_only=False):
    """run_trial plus the in-memory artifacts the figure writers need.

    ``plan_only`` stops after planning (the plan subcommand's contract).
    """
    from . import harness
    from .rng import derive_seed

    base_seed = derive_seed(scene.seed, "trial", cfg.trial_index)
    record = {
        "stage_error": None, "plan": None, "outcome": None, "goal": None,
        "belief": None, "truth_violations": [], "belief_violations": [],
    }
    timings = {"perceive": 0.0, "plan": 0.0, "execute": 0.0}
    import time as _time

    try:
        t0 = _time.perf_counter()
        obs, cloud, belief, goal, erasers = harness._perceive_and_ground(
            scene, cfg, base_seed, record)
        timings["perceive"] = _time.perf_counter() - t0
        t0 = _time.perf_counter()
        plan = harness._plan_stage(scene, belief, goal, cfg, base_seed, erasers)
        timings["plan"] = _time.perf_counter() - t0
        record["plan"] = plan
        if not plan_only:
            t0 = _time.perf_counter()
            outcome = harness._execute_stage(scene, plan, cfg, base_seed)
            timings["execute"] = _time.perf_counter() - t0
            record["outcome"] = outcome
    except harness._StageFailure as failure:
        record["stage_error"] = failure
    report = harness._finish_report(scene, cfg, base_seed, record, timings)
    return report, {"belief": record["belief"], "plan": record["plan"],
                    "outcome": record["outcome"]}


def cmd_eval(args):
    if os.path.isdir(args.scenes):
        paths = sorted(glob.glob(os.path.join(args.scenes, "*.scene")))
    else:
        paths = [args.scenes]
    if not paths:
        raise DesktampError(f"no .scene files under {args.scenes}")
    scenes = [_load(p) for p in paths]
    out = ensure_dir(args.out)
    schedule = parse_inject_spec(args.inject)

    reports = []
    idx = 0
    for scene in scenes:
        for k in range(args.trials):
            inject = schedule[idx % len(schedule)] if schedule else None
            idx += 1
            cfg = TrialConfig(
                grounder=args.grounder, inject=inject,
                noise_sigma=args.noise_sigma, mask_morph=args.mask_morph,
                trial_index=k,
            )
            report = run_trial(scene, cfg)
            reports.append(report)
            name = f"{scene.name}_t{k}.json"
            with open(os.path.join(out, name), "w") as fh:
                fh.write(report_to_json(report))
                fh.write("\n")
            print(f"{scene.name} trial {k}: success={report.success} "
                  f"class={report.failure_class}"
                  + (f" inject={inject}" if inject else ""))

    aggregate = aggregate_report(reports)
    with open(os.path.join(out, "aggregate.json"), "w") as fh:
        json.dump(aggregate, fh, indent=1, sort_keys=True)
        fh.write("\n")
    summary_csv(aggregate, os.path.join(out, "summary.csv"))
    flow_figure(aggregate, os.path.join(out, "failure_flow.png"))
    overall = aggregate["overall"]
    print(f"overall SR {overall['sr']}  TP {overall['tp']:.1f}%")
    return EXIT_OK


def cmd_render_depth(args):
    scene = _load(args.scene)
    seed = scene.seed if args.seed is None else args.seed
    obs = render_observation(scene, scene.camera, (args.noise_sigma, 0), seed=seed)
    blob = obs.to_bytes(scene.camera)
    ensure_dir(os.path.dirname(os.path.abspath(args.out)) or ".")
    with open(args.out, "wb") as fh:
        fh.write(blob)
    depth_figure(obs, os.path.splitext(args.out)[0] + ".png")
    print(f"wrote {args.out} ({len(blob)} bytes, "
          f"{sum(m.sum() for m in obs.masks.values())} object pixels)")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "plan": cmd_plan,
        "run": cmd_run,
        "eval": cmd_eval,
        "render-depth": cmd_render_depth,
    }
    try:
        return handlers[args.command](args)
    except DesktampError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
